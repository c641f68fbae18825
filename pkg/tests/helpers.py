import numpy as np

from hfthlf.ingest import PropertyRecord


def make_record(**kw) -> PropertyRecord:
    base = dict(
        city="Beijing", district="Haidian", residence="Garden Court", year=2005,
        building_type="High-rise", price=52000.5, area=88.0, bedroom=2, livingroom=1,
        kitchen=1, bathroom=1, floor=6, structure="Flat", decoration="Deluxe",
        direction="South",
    )
    base.update(kw)
    return PropertyRecord(**base)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - b| / max(|a|, |b|), elementwise, with a floor that ignores
    entries that are both ~0."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
