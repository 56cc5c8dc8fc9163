"""Bridge from pretrained bidirectional encoders to `.semb` streams."""

from .extract import EmptyInput, ExtractionJob, ModelLoadFailure, extract

__version__ = "0.1.0"
