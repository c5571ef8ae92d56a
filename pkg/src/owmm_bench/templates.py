"""Template and label banks shipped as data files."""

import json
import zlib
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable, Mapping


class TemplateHole(KeyError):
    """A template references an entity that was not bound."""


@lru_cache(maxsize=None)
def _load(name: str) -> dict:
    text = resources.files("owmm_bench.data").joinpath(name).read_text(encoding="utf-8")
    return json.loads(text)


def label_bank() -> dict:
    return _load("labels.json")


def stable_index(key: str, n: int) -> int:
    """Deterministic variant choice; ``hash()`` is salted per process so crc32 is used."""
    return zlib.crc32(key.encode("utf-8")) % n


def _fill(template: str, entities: Mapping[str, object]) -> str:
    try:
        return template.format_map(dict(entities))
    except KeyError as exc:
        raise TemplateHole(f"template needs {exc.args[0]!r}") from None


# Paraphrasers only ever see reasoning/summarization text.
Augmenter = Callable[[str], str]


def identity_augmenter(text: str) -> str:
    return text


@dataclass(frozen=True)
class TemplateBank:
    data: dict

    @classmethod
    def default(cls) -> "TemplateBank":
        return cls(_load("templates.json"))

    @property
    def initial_history(self) -> str:
        return self.data["initial_history"]

    def instruction(self, **entities) -> str:
        return _fill(self.data["instruction"], entities)

    def question(self, **entities) -> str:
        return _fill(self.data["question"], entities)

    def summary(self, slot: str, key: str, **entities) -> str:
        variants = self.data["summary"][slot]
        return _fill(variants[stable_index(f"{key}/summary/{slot}", len(variants))], entities)

    def reasoning(self, kind: str, key: str, **entities) -> str:
        variants = self.data["reasoning"][kind]
        return _fill(variants[stable_index(f"{key}/reasoning/{kind}", len(variants))], entities)

    def summary_variants(self, slot: str, **entities) -> list:
        return [_fill(t, entities) for t in self.data["summary"][slot]]
