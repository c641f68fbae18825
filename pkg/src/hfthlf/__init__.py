"""Cross-city property appraisal with a transferable homogeneous-feature
backbone and a per-city location head."""

__version__ = "0.1.0"
