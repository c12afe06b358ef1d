class ExportError(Exception):
    """Anything that prevents producing a model or feature artifact."""
