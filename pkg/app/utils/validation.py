"""
Instance upload validation
"""
import os
from fastapi import UploadFile, HTTPException, status

from app.config import settings
from app.services.errors import EdgeSelectorError
from app.services.instance import Instance, parse_instance

def validate_file_extension(filename: str) -> bool:
    """Check if file extension is allowed"""
    ext = os.path.splitext(filename)[1].lower()
    return ext.lstrip('.') in settings.allowed_extensions_list

def validate_file_size(file: UploadFile) -> bool:
    """Check if file size is within limits"""
    file.file.seek(0, 2)  # Seek to end
    size = file.file.tell()
    file.file.seek(0)

    max_size = settings.MAX_FILE_SIZE_MB * 1024 * 1024
    return 0 < size <= max_size

def parse_upload(file: UploadFile) -> tuple[Instance | None, str]:
    """
    Parse the uploaded text as a CVRPLIB or Solomon instance
    Returns: (instance or None, error message)
    """
    file.file.seek(0)
    raw = file.file.read()
    file.file.seek(0)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        return None, "Instance files must be UTF-8 text"
    try:
        return parse_instance(text, file.filename), ""
    except EdgeSelectorError as e:
        return None, f"Invalid instance: {e}"

def validate_upload_file(file: UploadFile) -> tuple[bool, str, Instance | None]:
    """
    Comprehensive file validation
    Returns: (is_valid, error_message, parsed instance)
    """
    if not file:
        return False, "No file provided", None

    if not file.filename:
        return False, "Filename is required", None

    if not validate_file_extension(file.filename):
        allowed = ", ".join(settings.allowed_extensions_list)
        return False, f"File type not allowed. Allowed types: {allowed}", None

    if not validate_file_size(file):
        return False, f"File empty or too large. Maximum size: {settings.MAX_FILE_SIZE_MB}MB", None

    instance, error = parse_upload(file)
    if instance is None:
        return False, error, None

    return True, "File is valid", instance

async def save_upload_file(file: UploadFile, filepath: str) -> int:
    """
    Save uploaded file to specified path
    Returns: file size in bytes
    """
    try:
        with open(filepath, "wb") as f:
            content = await file.read()
            f.write(content)
            return len(content)
    except OSError as e:
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Failed to save file: {str(e)}"
        )
    finally:
        await file.seek(0)
