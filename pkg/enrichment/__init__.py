"""Two-stage adaptive enrichment trials with longitudinal biomarker analyses."""

__version__ = "0.1.0"
