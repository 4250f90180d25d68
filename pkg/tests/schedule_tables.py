"""Parse the per-step class tables out of the reference write-up (LaTeX table source)."""
from __future__ import annotations

import re

_DATASETS = {"Office-31": "office31", "Office-Home": "officehome", "Mini-DomainNet": "minidomainnet"}


def parse_step_tables(text: str) -> dict[str, list[list[str]]]:
    start = text.index("Class names in each time step")
    body = text[start : text.index(r"\end{tabular}", start)]
    out: dict[str, list[list[str]]] = {}
    current = None
    for line in body.splitlines():
        cols = line.split("&")
        if len(cols) != 4:
            continue
        for label, key in _DATASETS.items():
            if label + "~" in cols[0]:
                current = key
                out[current] = []
        if current is None:
            continue
        if "Step" in cols[1]:
            out[current].append([])
        names = cols[3].replace(r"\\", "").replace(r"\_", "_")
        out[current][-1].extend(n.strip() for n in re.split(r",|\n", names) if n.strip())
    return out
