"""Data loader module - JSON document loading and schema validation.

Validates the structured documents the package reads from disk: parsed
network configurations and sequence manifests. Schemas ship inside the
package under mvcache/schemas and are cached after the first load.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from jsonschema import ValidationError as JsonValidationError
from jsonschema import validate

from mvcache.core.errors import MVCacheError

logger = logging.getLogger(__name__)

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "schemas"

NETWORK_SCHEMA = "network_schema.json"
MANIFEST_SCHEMA = "manifest_schema.json"


class DataLoaderError(MVCacheError):
    """A JSON document could not be loaded."""


class SchemaNotFoundError(DataLoaderError):
    """No schema of that name in the schema directory."""


class DataValidationError(DataLoaderError):
    """A document is malformed JSON or violates its schema.

    Attributes:
        path: JSON path (list of keys/indices) of the failing element
    """

    def __init__(self, message: str, path: Optional[list] = None) -> None:
        super().__init__(message)
        self.path = path or []


class DataLoader:
    """Loader and validator for JSON documents.

    Example:
        >>> loader = DataLoader()
        >>> manifest = loader.load_document(Path("seq/manifest.json"), MANIFEST_SCHEMA)
        >>> manifest["scenario"]
        'pan'
    """

    def __init__(self, schema_dir: Union[str, Path, None] = None) -> None:
        """
        Args:
            schema_dir: Directory holding *.json schemas (package schemas by default)
        """
        self.schema_dir = Path(schema_dir) if schema_dir is not None else SCHEMA_DIR
        self.schemas: Dict[str, dict] = {}

    def load_schema(self, schema_filename: str) -> dict:
        """Load (and cache) a JSON schema.

        Args:
            schema_filename: Schema file name (e.g., "manifest_schema.json")

        Returns:
            Loaded schema as dictionary

        Raises:
            SchemaNotFoundError: If schema file doesn't exist
            DataValidationError: If the schema is not valid JSON
        """
        if schema_filename in self.schemas:
            return self.schemas[schema_filename]

        schema_path = self.schema_dir / schema_filename
        if not schema_path.exists():
            raise SchemaNotFoundError(f"Schema not found: {schema_path}")

        try:
            with open(schema_path, "r", encoding="utf-8") as f:
                schema = json.load(f)
        except json.JSONDecodeError as e:
            raise DataValidationError(f"Invalid JSON in schema {schema_filename}: {e}")

        self.schemas[schema_filename] = schema
        return schema

    def validate_data(self, data: Any, schema_filename: str) -> None:
        """Validate data against a named schema.

        Raises:
            DataValidationError: If validation fails
        """
        schema = self.load_schema(schema_filename)
        try:
            validate(instance=data, schema=schema)
        except JsonValidationError as e:
            raise DataValidationError(
                f"Validation failed: {e.message} at {list(e.path)}",
                path=list(e.path),
            )

    def load_json_file(self, file_path: Path) -> Any:
        """Parse one JSON file without validation.

        Raises:
            DataLoaderError: If the file is missing
            DataValidationError: If JSON is invalid
        """
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise DataValidationError(f"Invalid JSON in {file_path.name}: {e}")
        except FileNotFoundError:
            raise DataLoaderError(f"File not found: {file_path}")

    def load_document(self, file_path: Path, schema_filename: str) -> Any:
        """Load a JSON file and validate it against a schema."""
        data = self.load_json_file(Path(file_path))
        self.validate_data(data, schema_filename)
        logger.debug(f"Loaded {file_path} against {schema_filename}")
        return data

    def get_stats(self) -> dict:
        return {"schema_dir": str(self.schema_dir), "schemas_cached": len(self.schemas)}


_loader: Optional[DataLoader] = None


def get_global_loader() -> DataLoader:
    """Shared loader over the package schemas."""
    global _loader
    if _loader is None:
        _loader = DataLoader()
    return _loader


def reset_global_loader() -> None:
    """Forget the shared loader and its schema cache."""
    global _loader
    _loader = None
