"""Instruction template banks and placeholder substitution."""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

from .model import PLACEHOLDER_RE

PLACEHOLDERS = frozenset(
    {"<object>", "<subject>", "<relation>", "<loc>", "<number>", "<category>", "<question>", "<options>", "<expr>"}
)

# placeholders each bank may use, keyed by task name (all variants share them)
BANK_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "relation_qa": frozenset({"<subject>", "<object>"}),
    "relation_detect": frozenset({"<subject>", "<relation>"}),
    "spatial": frozenset({"<object>", "<loc>"}),
    "counting": frozenset({"<category>", "<object>"}),
    "detection": frozenset({"<category>", "<object>"}),
    "multichoice": frozenset({"<question>", "<options>"}),
    "grounding": frozenset({"<expr>"}),
    "ground_caption": frozenset({"<object>"}),
}

_HEADER_RE = re.compile(r"^\[(\w+):(\d+)\]$")


class TemplateError(ValueError):
    pass


def placeholders_in(template: str) -> set[str]:
    return set(PLACEHOLDER_RE.findall(template))


def instantiate_template(template: str, bindings: Mapping[str, str]) -> str:
    """Replace every ``<name>`` in ``template`` with ``bindings[name]``.

    Keys may be given with or without angle brackets. Substitution is a
    single pass, so bound values are never re-scanned.
    """
    norm = {(k if k.startswith("<") else f"<{k}>"): v for k, v in bindings.items()}
    missing = sorted(placeholders_in(template) - norm.keys())
    if missing:
        raise TemplateError(f"missing binding for {', '.join(missing)}")
    return PLACEHOLDER_RE.sub(lambda m: norm[m.group(0)], template)


@dataclass(frozen=True)
class TemplateBank:
    banks: Mapping[tuple[str, int], tuple[str, ...]]

    def __getitem__(self, key: tuple[str, int]) -> tuple[str, ...]:
        try:
            return self.banks[key]
        except KeyError:
            raise TemplateError(f"no template bank {key[0]}#{key[1]}") from None

    def keys(self):
        return self.banks.keys()

    def check(self) -> list[str]:
        """Return bank entries that use placeholders outside their declared set."""
        bad = []
        for (task, variant), templates in self.banks.items():
            allowed = BANK_PLACEHOLDERS.get(task, PLACEHOLDERS)
            for t in templates:
                extra = placeholders_in(t) - allowed
                if extra:
                    bad.append(f"{task}#{variant}: {t!r} uses {sorted(extra)}")
        return bad


def parse_bank(text: str) -> TemplateBank:
    banks: dict[tuple[str, int], list[str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _HEADER_RE.match(line)
        if m:
            current = (m.group(1), int(m.group(2)))
            banks.setdefault(current, [])
            continue
        if current is None:
            raise TemplateError(f"line {lineno}: template before any [task:variant] header")
        banks[current].append(line.replace("\\n", "\n"))
    bank = TemplateBank({k: tuple(v) for k, v in banks.items()})
    bad = bank.check()
    if bad:
        raise TemplateError("; ".join(bad))
    return bank


_default: TemplateBank | None = None


def load_bank(path: str | Path | None = None) -> TemplateBank:
    """Load the bundled bank, or a user file in the same format."""
    global _default
    if path is not None:
        return parse_bank(Path(path).read_text(encoding="utf-8"))
    if _default is None:
        _default = parse_bank(resources.files("rcinstruct").joinpath("data/templates.txt").read_text(encoding="utf-8"))
    return _default
