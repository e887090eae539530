from typing import Optional


class GnppError(Exception):
    """Base error. `detail` is shown to the user, `exit_code` is returned by the CLI."""

    exit_code: int = 2

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(GnppError):
    exit_code = 1


class ArchParseError(GnppError):
    exit_code = 1

    def __init__(self, detail: str, offset: int):
        super().__init__(f"{detail} (at byte offset {offset})")
        self.offset = offset


class PlacementError(GnppError):
    exit_code = 1

    def __init__(self, detail: str, layer_index: int):
        super().__init__(f"layer {layer_index}: {detail}")
        self.layer_index = layer_index


class ShapeError(GnppError):
    exit_code = 2


class DataFormatError(GnppError):
    exit_code = 2

    def __init__(self, detail: str, path: Optional[str] = None):
        super().__init__(f"{path}: {detail}" if path else detail)
        self.path = path


class CheckpointError(GnppError):
    exit_code = 2


class VerificationError(GnppError):
    exit_code = 3
