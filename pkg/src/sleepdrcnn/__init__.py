"""Dense recurrent convolutional network for sleep arousal and apnea detection."""

from .errors import FormatError, NumericalError, SleepNetError, ValidationError

__version__ = "0.1.0"

__all__ = ["FormatError", "NumericalError", "SleepNetError", "ValidationError", "__version__"]
