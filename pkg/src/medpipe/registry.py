"""Model database: the JSON catalogue of deployable models.

Top-level keys "table" and "image" map model ids to descriptors. Table entries
carry modality/headers/output; image entries carry modality/caption.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import RegistryError


@dataclass(frozen=True)
class ModelDescriptor:
    id: str
    kind: str  # "table" or "image"
    modality: str
    headers: tuple[str, ...] = ()
    output: str = ""
    caption: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("table", "image"):
            raise RegistryError(f"model {self.id!r}: unknown kind {self.kind!r}")
        if self.kind == "table":
            if not self.headers:
                raise RegistryError(f"model {self.id!r}: table model needs headers")
            if len(set(self.headers)) != len(self.headers):
                raise RegistryError(f"model {self.id!r}: duplicate required headers")
            if not self.output:
                raise RegistryError(f"model {self.id!r}: table model needs an output")
            if self.output not in self.headers:
                raise RegistryError(
                    f"model {self.id!r}: output {self.output!r} not among headers"
                )
        else:
            if not self.caption:
                raise RegistryError(f"model {self.id!r}: image model needs a caption")


@dataclass(frozen=True)
class ModelDatabase:
    table: tuple[ModelDescriptor, ...]
    image: tuple[ModelDescriptor, ...]

    def __post_init__(self) -> None:
        ids = [m.id for m in self.table + self.image]
        if len(set(ids)) != len(ids):
            raise RegistryError("duplicate model ids across the registry")

    @property
    def table_models(self) -> tuple[ModelDescriptor, ...]:
        # Sorted by id so downstream iteration never depends on insertion order.
        return tuple(sorted(self.table, key=lambda m: m.id))

    @property
    def image_models(self) -> tuple[ModelDescriptor, ...]:
        return tuple(sorted(self.image, key=lambda m: m.id))

    def get(self, model_id: str) -> ModelDescriptor:
        for m in self.table + self.image:
            if m.id == model_id:
                return m
        raise RegistryError(f"unknown model id {model_id!r}")


def _require_str(entry: dict, model_id: str, key: str) -> str:
    value = entry.get(key)
    if not isinstance(value, str) or not value:
        raise RegistryError(f"model {model_id!r}: {key!r} must be a non-empty string")
    return value


def parse_registry(doc: dict) -> ModelDatabase:
    if not isinstance(doc, dict):
        raise RegistryError("registry root must be a JSON object")
    unknown = set(doc) - {"table", "image"}
    if unknown:
        raise RegistryError(f"unknown top-level registry keys: {sorted(unknown)}")
    table: list[ModelDescriptor] = []
    for model_id, entry in (doc.get("table") or {}).items():
        if not isinstance(entry, dict):
            raise RegistryError(f"model {model_id!r}: entry must be an object")
        headers = entry.get("headers")
        if (
            not isinstance(headers, list)
            or not headers
            or not all(isinstance(h, str) and h for h in headers)
        ):
            raise RegistryError(
                f"model {model_id!r}: 'headers' must be a non-empty string list"
            )
        table.append(
            ModelDescriptor(
                id=model_id,
                kind="table",
                modality=_require_str(entry, model_id, "modality"),
                headers=tuple(headers),
                output=_require_str(entry, model_id, "output"),
            )
        )
    image: list[ModelDescriptor] = []
    for model_id, entry in (doc.get("image") or {}).items():
        if not isinstance(entry, dict):
            raise RegistryError(f"model {model_id!r}: entry must be an object")
        image.append(
            ModelDescriptor(
                id=model_id,
                kind="image",
                modality=_require_str(entry, model_id, "modality"),
                caption=_require_str(entry, model_id, "caption"),
            )
        )
    if not table and not image:
        raise RegistryError("registry declares no models")
    return ModelDatabase(table=tuple(table), image=tuple(image))


def load_registry(path: str | Path) -> ModelDatabase:
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except OSError as exc:
        raise RegistryError(f"cannot read registry {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise RegistryError(f"registry {p} is not valid JSON: {exc}") from exc
    return parse_registry(doc)
