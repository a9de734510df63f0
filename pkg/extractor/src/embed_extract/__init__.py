from embed_extract.extract import ExtractorConfig, ExtractorError, extract

__all__ = ["ExtractorConfig", "ExtractorError", "extract"]
__version__ = "0.1.0"
