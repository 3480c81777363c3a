from typing import Any, Dict, Optional


class PipelineError(Exception):
    """Custom exception for pipeline errors with detailed information."""

    def __init__(self, message: str, error_type: str, details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.error_type = error_type
        self.details = details or {}
        super().__init__(self.message)

    def to_dict(self) -> Dict[str, Any]:
        """Machine-readable form used by the CLI and the HTTP service."""
        return {
            "success": False,
            "error_type": self.error_type,
            "message": self.message,
            "details": self.details,
        }
