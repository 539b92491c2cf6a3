"""Dataset manifests.

A manifest is a JSON file listing the instances of a dataset plus the
global quantities shared by all of them (inlet speed, frontal area,
inlet direction). Geometry and solution paths are stored relative to
the manifest's own directory so a dataset folder can be moved around
as a unit.

Layout:

  {
    "globals": {"v_inlet": 1.0, "area_frontal": 3.14159,
                "inlet": [1.0, 0.0, 0.0]},
    "entries": [
      {"geometry": "instances/star_0000.csv",
       "solution": "instances/star_0000_u.csv",
       "cd": 0.1234,
       "total_area": 6.78,
       "split": "train"},
      ...
    ]
  }

"solution", "cd" and "total_area" are optional per entry (geometry-only
datasets are fine for embed sweeps). "split" is free-form text; the
conventional values are "train" and "test".
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from ..errors import FormatError, InvalidInputError


@dataclasses.dataclass
class ManifestEntry:
    geometry: str
    solution: str | None = None
    cd: float | None = None
    total_area: float | None = None
    split: str = "train"

    def to_dict(self) -> dict:
        d = {"geometry": self.geometry, "split": self.split}
        if self.solution is not None:
            d["solution"] = self.solution
        if self.cd is not None:
            d["cd"] = self.cd
        if self.total_area is not None:
            d["total_area"] = self.total_area
        return d


@dataclasses.dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    v_inlet: float | None = None
    area_frontal: float | None = None
    inlet: tuple[float, float, float] | None = None

    def entries_for(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def splits(self) -> list[str]:
        seen = []
        for e in self.entries:
            if e.split not in seen:
                seen.append(e.split)
        return seen

    def geometry_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.geometry

    def solution_path(self, entry: ManifestEntry) -> Path | None:
        return None if entry.solution is None else self.root / entry.solution

    def to_dict(self) -> dict:
        g: dict = {}
        if self.v_inlet is not None:
            g["v_inlet"] = self.v_inlet
        if self.area_frontal is not None:
            g["area_frontal"] = self.area_frontal
        if self.inlet is not None:
            g["inlet"] = list(self.inlet)
        return {"globals": g, "entries": [e.to_dict() for e in self.entries]}

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise InvalidInputError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", path=str(path))

    if not isinstance(raw, dict) or "entries" not in raw:
        raise FormatError("manifest must be an object with an 'entries' list",
                          path=str(path))
    g = raw.get("globals", {})
    entries = []
    for i, e in enumerate(raw["entries"]):
        if "geometry" not in e:
            raise FormatError(f"entry {i} is missing 'geometry'", path=str(path))
        entries.append(ManifestEntry(
            geometry=e["geometry"],
            solution=e.get("solution"),
            cd=None if e.get("cd") is None else float(e["cd"]),
            total_area=None if e.get("total_area") is None else float(e["total_area"]),
            split=e.get("split", "train"),
        ))

    man = DatasetManifest(
        root=path.parent,
        entries=entries,
        v_inlet=None if g.get("v_inlet") is None else float(g["v_inlet"]),
        area_frontal=None if g.get("area_frontal") is None else float(g["area_frontal"]),
        inlet=None if g.get("inlet") is None else tuple(float(x) for x in g["inlet"]),
    )
    if man.inlet is not None and len(man.inlet) != 3:
        raise FormatError("globals.inlet must have 3 components", path=str(path))

    if check_paths:
        for e in man.entries:
            gp = man.geometry_path(e)
            if not gp.is_file():
                raise InvalidInputError(f"geometry file missing: {gp}")
            sp = man.solution_path(e)
            if sp is not None and not sp.is_file():
                raise InvalidInputError(f"solution file missing: {sp}")
    return man
