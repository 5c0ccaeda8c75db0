"""Exception types raised across the toolkit."""


class HybridSRError(Exception):
    """Base class; ``code`` is the machine-readable tag the CLI prints."""

    code = "error"


class ShapeError(HybridSRError, ValueError):
    code = "shape_mismatch"

    def __init__(self, message, layer=None, dims=None):
        self.layer = layer
        self.dims = dims
        where = f"layer {layer}: " if layer is not None else ""
        extra = f" (dims={dims})" if dims is not None else ""
        super().__init__(f"{where}{message}{extra}")


class ModelFormatError(HybridSRError, ValueError):
    code = "model_format"


class PlanError(HybridSRError, ValueError):
    code = "plan"


class ImageError(HybridSRError, ValueError):
    code = "image"


class DatasetError(HybridSRError, ValueError):
    code = "dataset"


class BudgetExhausted(HybridSRError, RuntimeError):
    code = "budget"
