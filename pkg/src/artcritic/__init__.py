"""Joint rubric scoring and critique generation with a toy vision-language model."""

__version__ = "0.1.0"
