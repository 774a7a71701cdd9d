"""3D CNN glioma grading on a small numpy autodiff engine, with GBP/Grad-CAM QA."""

from .errors import CheckpointError, DataError, GliogradError, NumericalError
from .tensor import GradMode, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = ["CheckpointError", "DataError", "GliogradError", "NumericalError", "GradMode", "Tape", "Tensor",
           "backward", "__version__"]
