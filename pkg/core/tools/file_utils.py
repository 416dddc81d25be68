"""
File utilities for experiment outputs
"""

import hashlib
import json
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd
from pydantic import BaseModel

CSV_FLOAT_FORMAT = "%.9g"


class FileUtils:
    """Utility class for file operations"""

    @staticmethod
    def ensure_directory(directory: Union[str, Path]) -> Path:
        """Create a directory (and parents) if needed and return it"""
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        return path

    @staticmethod
    def write_json(data: Union[BaseModel, Dict[str, Any]], file_path: Union[str, Path]) -> Path:
        """
        Write a pydantic model or plain mapping as indented JSON

        Args:
            data: Model (serialized with model_dump_json) or JSON-compatible dictionary
            file_path: Destination file

        Returns:
            Path of the written file
        """
        path = Path(file_path)
        FileUtils.ensure_directory(path.parent)
        if isinstance(data, BaseModel):
            text = data.model_dump_json(indent=2)
        else:
            text = json.dumps(data, indent=2)
        path.write_text(text, encoding="utf-8")
        return path

    @staticmethod
    def write_csv(
        rows: Sequence[Dict[str, Any]],
        file_path: Union[str, Path],
        columns: Optional[List[str]] = None,
    ) -> Path:
        """
        Write rows as CSV with a header, '.' decimals and 9 significant digits

        Args:
            rows: One mapping per row
            file_path: Destination file
            columns: Column order (keys of the first row when omitted)

        Returns:
            Path of the written file
        """
        path = Path(file_path)
        FileUtils.ensure_directory(path.parent)
        frame = pd.DataFrame(list(rows), columns=columns)
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, decimal=".")
        return path

    @staticmethod
    def get_file_hash(file_path: Union[str, Path]) -> Optional[str]:
        """Get SHA256 hash of file"""
        try:
            with open(file_path, "rb") as f:
                return hashlib.sha256(f.read()).hexdigest()
        except (OSError, PermissionError):
            return None

    @staticmethod
    def sanitize_filename(filename: str) -> str:
        """Replace characters that are unsafe in file names"""
        cleaned = re.sub(r"[^A-Za-z0-9._-]+", "_", filename.strip())
        return cleaned.strip("._") or "unnamed"
