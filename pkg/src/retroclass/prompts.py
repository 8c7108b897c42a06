"""Prompt templates and per-class specs.

Two prompt styles exist: a generic one ("a photo of a {CLS}") and a
domain-specific one ("a {domain word} of a {CLS}"). Substitution is verbatim,
with no article agreement, so "a amplifier" is the expected rendering.

A classification setup typically uses the domain-specific template for the
zero-shot prompt and the generic template for the retrieval prompt; both are
carried per class so the two encoders can be driven independently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import errors
from .bank import EmbeddingBank

GENERIC_PREFIX = "a photo of a"


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt prefix; expansion appends the class name."""

    prefix: str
    style: str = "generic"
    domain_word: str | None = None

    def __post_init__(self):
        if self.style not in ("generic", "domain_specific"):
            raise errors.ValidationError(f"unknown template style {self.style!r}")
        if not isinstance(self.prefix, str) or not self.prefix.strip():
            raise errors.ValidationError("template prefix must be non-empty")
        if self.style == "generic" and " ".join(self.prefix.split()) != GENERIC_PREFIX:
            raise errors.ValidationError(
                f'generic templates must use the prefix "{GENERIC_PREFIX}"')

    @classmethod
    def generic(cls) -> "PromptTemplate":
        return cls(GENERIC_PREFIX, style="generic")

    @classmethod
    def domain_specific(cls, domain_word: str) -> "PromptTemplate":
        if not domain_word or not domain_word.strip():
            raise errors.ValidationError("domain word must be non-empty")
        word = " ".join(domain_word.split())
        return cls(f"a {word} of a", style="domain_specific", domain_word=word)

    @classmethod
    def from_prefix(cls, prefix: str) -> "PromptTemplate":
        cleaned = " ".join(prefix.split())
        if cleaned == GENERIC_PREFIX:
            return cls.generic()
        return cls(cleaned, style="domain_specific")


def expand_template(template: PromptTemplate, class_name: str) -> str:
    """Render the prompt for one class name.

    Output has no leading or trailing whitespace and single spaces between
    tokens; the class name appears exactly once, verbatim.
    """
    if not isinstance(class_name, str) or not class_name.strip():
        raise errors.EmptyClassName("class name must be non-empty")
    return " ".join(f"{template.prefix} {class_name}".split())


@dataclass(frozen=True)
class ClassSpec:
    """Everything classification needs for one class.

    Rows of ``prototypes`` and ``retrieval_queries`` are aligned with
    ``all_names`` (primary name first, aliases after, declared order). Alias
    rows stay separate until a merge policy combines them.
    """

    index: int
    name: str
    aliases: tuple[str, ...]
    zeroshot_prompts: tuple[str, ...]
    retrieval_prompts: tuple[str, ...]
    prototypes: np.ndarray          # (n_names, dim) float32 unit rows
    retrieval_queries: np.ndarray   # (n_names, retrieval dim) float32 unit rows
    prototype_space: str
    retrieval_space: str

    def __post_init__(self):
        for arr_name in ("prototypes", "retrieval_queries"):
            arr = np.asarray(getattr(self, arr_name), dtype=np.float32)
            if arr.ndim != 2 or arr.shape[0] != 1 + len(self.aliases):
                raise errors.PromptBankMismatch(
                    f"{arr_name} must have one row per name for class {self.name!r}")
            arr.setflags(write=False)
            object.__setattr__(self, arr_name, arr)

    @property
    def all_names(self) -> tuple[str, ...]:
        return (self.name,) + self.aliases

    @property
    def zeroshot_prompt(self) -> str:
        return self.zeroshot_prompts[0]

    @property
    def retrieval_prompt(self) -> str:
        return self.retrieval_prompts[0]

    def merged_prototype(self) -> np.ndarray:
        return merge_alias_prototypes(self.prototypes)

    def merged_retrieval_query(self) -> np.ndarray:
        return merge_alias_prototypes(self.retrieval_queries)


def merge_alias_prototypes(vectors) -> np.ndarray:
    """Renormalized mean of the given vectors. Permutation invariant."""
    matrix = np.asarray(vectors, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    if matrix.shape[0] == 0:
        raise errors.EmptyMerge("no vectors to merge")
    mean = matrix.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm <= 1e-8:
        raise errors.DegenerateMerge("merged vectors cancel out")
    return (mean / norm).astype(np.float32)


def build_class_specs(classes: list[tuple[str, list[str]]],
                      zeroshot_template: PromptTemplate,
                      retrieval_template: PromptTemplate,
                      prototype_bank: EmbeddingBank,
                      retrieval_query_bank: EmbeddingBank) -> list[ClassSpec]:
    """Assemble specs from class declarations plus two aligned prompt banks.

    Bank row r corresponds to the r-th rendered prompt, walking classes in
    declared order and names within a class as (primary, aliases...).
    """
    if not classes:
        raise errors.ValidationError("class list is empty")
    seen = set()
    rendered = 0
    for name, aliases in classes:
        if not isinstance(name, str) or not name.strip():
            raise errors.EmptyClassName("class name must be non-empty")
        if name in seen:
            raise errors.ValidationError(f"duplicate class name {name!r}")
        seen.add(name)
        rendered += 1 + len(aliases)
    for bank, label in ((prototype_bank, "prototype"),
                        (retrieval_query_bank, "retrieval query")):
        if bank.count != rendered:
            raise errors.PromptBankMismatch(
                f"{rendered} prompts but {label} bank has {bank.count} rows")

    specs = []
    row = 0
    for class_index, (name, aliases) in enumerate(classes):
        names = (name, *aliases)
        n = len(names)
        specs.append(ClassSpec(
            index=class_index,
            name=name,
            aliases=tuple(aliases),
            zeroshot_prompts=tuple(expand_template(zeroshot_template, nm)
                                   for nm in names),
            retrieval_prompts=tuple(expand_template(retrieval_template, nm)
                                    for nm in names),
            prototypes=np.array(prototype_bank.vectors[row:row + n]),
            retrieval_queries=np.array(retrieval_query_bank.vectors[row:row + n]),
            prototype_space=prototype_bank.space_tag,
            retrieval_space=retrieval_query_bank.space_tag,
        ))
        row += n
    return specs


# ---------------------------------------------------------------------------
# class config file: {"classes": [{"name": ..., "aliases": [...]}, ...],
#                     "zeroshot_prefix": ..., "retrieval_prefix": ...}


def parse_class_config(obj: dict) -> tuple[list[tuple[str, list[str]]],
                                           PromptTemplate, PromptTemplate]:
    if not isinstance(obj, dict):
        raise errors.ValidationError("class config must be a JSON object")
    try:
        raw_classes = obj["classes"]
        zs_prefix = obj["zeroshot_prefix"]
        rt_prefix = obj["retrieval_prefix"]
    except KeyError as exc:
        raise errors.ValidationError(f"class config missing key {exc}") from exc
    if not isinstance(raw_classes, list) or not raw_classes:
        raise errors.ValidationError("class config needs a non-empty class list")
    classes = []
    for entry in raw_classes:
        if not isinstance(entry, dict) or "name" not in entry:
            raise errors.ValidationError("each class entry needs a name")
        aliases = entry.get("aliases", [])
        if not isinstance(aliases, list) or not all(isinstance(a, str) for a in aliases):
            raise errors.ValidationError("aliases must be a list of strings")
        classes.append((entry["name"], list(aliases)))
    return (classes,
            PromptTemplate.from_prefix(zs_prefix),
            PromptTemplate.from_prefix(rt_prefix))


def load_class_config(path) -> tuple[list[tuple[str, list[str]]],
                                     PromptTemplate, PromptTemplate]:
    try:
        with open(Path(path), encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise errors.IoError(f"cannot read class config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise errors.ValidationError(f"class config is not valid JSON: {exc}") from exc
    return parse_class_config(obj)
