# prompt_loader.py
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from ..errors import DataError
from ..labels import DISEASES


def find_project_root(start: Path | None = None) -> Path:
    """
    Find project root by walking upward until pyproject.toml or .git is found.
    Falls back to the directory three levels above this file (src/gdmrg/utils/ -> project root).
    """
    here = (start or Path(__file__)).resolve()
    for p in [here, *here.parents]:
        if (p / "pyproject.toml").exists() or (p / ".git").exists():
            return p
    return Path(__file__).resolve().parents[3]


PROJECT_ROOT = find_project_root()
PROMPT_DIR = PROJECT_ROOT / "prompt"
SECTIONS = ("positive", "normal", "negative")


@dataclass(frozen=True)
class ReportClauses:
    positive: dict[str, tuple[str, ...]]
    normal: tuple[str, ...]
    negative: dict[str, tuple[str, ...]]


def parse_report_clauses(text: str, source: str = "<string>") -> ReportClauses:
    """
    사용법:
        clauses = parse_report_clauses(path.read_text())
        clauses.positive["Cardiomegaly"]  # ('the', 'heart', 'is', 'enlarged', '.')
    """
    sections: dict[str, dict[str, tuple[str, ...]]] = {s: {} for s in SECTIONS}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or (line.startswith("#") and not line.startswith("##")):
            continue
        if line.startswith("##"):
            current = line.lstrip("#").strip()
            if current not in sections:
                raise DataError(f"{source}:{lineno}: unknown section '{current}'")
            continue
        if current is None:
            raise DataError(f"{source}:{lineno}: clause outside of a section")
        name, sep, clause = line.partition("|")
        if not sep or not clause.strip():
            raise DataError(f"{source}:{lineno}: expected 'name | clause'")
        sections[current][name.strip()] = tuple(clause.split())

    missing = [d for d in DISEASES if d not in sections["positive"]]
    if missing:
        raise DataError(f"{source}: no positive clause for {', '.join(missing)}")
    if len(sections["normal"]) != 1:
        raise DataError(f"{source}: exactly one normal-summary clause is required")
    unknown = [d for d in sections["negative"] if d not in DISEASES]
    if unknown:
        raise DataError(f"{source}: negation clause for unknown disease(s) {', '.join(unknown)}")
    return ReportClauses(
        positive=sections["positive"],
        normal=next(iter(sections["normal"].values())),
        negative=sections["negative"],
    )


@lru_cache(maxsize=None)
def load_report_clauses(path: str | None = None) -> ReportClauses:
    path = Path(path) if path else PROMPT_DIR / "report_clauses.txt"
    if not path.exists():
        raise DataError(f"report clause file not found: {path}")
    return parse_report_clauses(path.read_text(encoding="utf-8"), str(path))
