"""Direct left-ventricle index regression on synthetic cardiac phantoms."""

__version__ = "0.1.0"
