"""Flat key=value text files used for configs and experiment specs."""

from __future__ import annotations

__all__ = ["KvFormatError", "parse_kv_text", "parse_kv_file", "render_kv"]


class KvFormatError(ValueError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; '#' starts a comment, blanks ignored."""
    out: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise KvFormatError(line_no, f"expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise KvFormatError(line_no, "empty key")
        if key in out:
            raise KvFormatError(line_no, f"duplicate key {key!r}")
        out[key] = value
    return out


def parse_kv_file(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read())


def render_kv(pairs: dict[str, str]) -> str:
    """Render keys in sorted order so equal dicts produce equal text."""
    lines = []
    for key in sorted(pairs):
        value = str(pairs[key])
        if "\n" in key or "\n" in value:
            raise ValueError(f"newline in key or value for {key!r}")
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
