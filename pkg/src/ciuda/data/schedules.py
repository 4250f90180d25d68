"""Class-incremental step schedules for the three benchmarks plus a synthetic one.

Step class lists are transcribed verbatim from the published split tables.
Those tables cover 30 of Office-31's 31 classes, 60 of Office-Home's 65 and
120 of Mini-DomainNet's 126; the remaining classes are appended after the
scheduled ones. They stay in the source label space and the prediction
space, but no target step contains them.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigurationError

OFFICE31_STEPS = [
    ["back pack", "bike", "bike helmet", "bookcase", "bottle", "calculator",
     "desk chair", "desk lamp", "desktop computer", "file cabinet"],
    ["headphones", "keyboard", "laptop computer", "letter tray",
     "mobile phone", "monitor", "mouse", "mug", "paper notebook", "pen"],
    ["phone", "printer", "projector", "punchers", "ring binder", "ruler",
     "scissors", "speaker", "stapler", "tape dispenser"],
]
OFFICE31_UNSCHEDULED = ["trash can"]

OFFICEHOME_STEPS = [
    ["Drill", "Exit Sign", "Bottle", "Glasses", "Computer",
     "File Cabinet", "Shelf", "Toys", "Sink", "Laptop"],
    ["Kettle", "Folder", "Keyboard", "Flipflops", "Pencil",
     "Bed", "Hammer", "ToothBrush", "Couch", "Bike"],
    ["Postit Notes", "Mug", "Webcam", "Desk Lamp", "Telephone",
     "Helmet", "Mouse", "Pen", "Monitor", "Mop"],
    ["Sneakers", "Notebook", "Backpack", "Alarm Clock", "Push Pin",
     "Paper Clip", "Batteries", "Radio", "Fan", "Ruler"],
    ["Pan", "Screwdriver", "Trash Can", "Printer", "Speaker",
     "Eraser", "Bucket", "Chair", "Calendar", "Calculator"],
    ["Flowers", "Lamp Shade", "Spoon", "Candles", "Clipboards",
     "Scissors", "TV", "Curtains", "Fork", "Soda"],
]
OFFICEHOME_UNSCHEDULED = ["Knives", "Marker", "Oven", "Refrigerator", "Table"]

MINIDOMAINNET_STEPS = [
    ["aircraft carrier", "alarm clock", "ant", "anvil", "asparagus", "axe", "banana",
     "basket", "bathtub", "bear", "bee", "bird", "blackberry", "blueberry",
     "bottlecap", "broccoli", "bus", "butterfly", "cactus", "cake"],
    ["calculator", "camel", "camera", "candle", "cannon", "canoe", "carrot",
     "castle", "cat", "ceiling fan", "cello", "cell phone", "chair", "chandelier",
     "coffee cup", "compass", "computer", "cow", "crab", "crocodile"],
    ["cruise_ship", "dog", "dolphin", "dragon", "drums", "duck", "dumbbell",
     "elephant", "eyeglasses", "feather", "fence", "fish", "flamingo",
     "flower", "foot", "fork", "frog", "giraffe", "goatee", "grapes"],
    ["guitar", "hammer", "helicopter", "helmet", "horse", "kangaroo", "lantern",
     "laptop", "leaf", "lion", "lipstick", "lobster", "microphone", "monkey",
     "mosquito", "mouse", "mug", "mushroom", "onion", "panda"],
    ["peanut", "pear", "peas", "pencil", "penguin", "pig", "pillow", "pineapple",
     "potato", "power outlet", "purse", "rabbit", "raccoon", "rhinoceros",
     "rifle", "saxophone", "screwdriver", "sea turtle", "see saw", "sheep"],
    ["shoe", "skateboard", "snake", "speedboat", "spider", "squirrel", "strawberry",
     "streetlight", "string bean", "submarine", "swan", "table", "teapot", "teddy-bear",
     "television", "The Eiffel Tower", "The Great Wall of China", "tiger", "toe", "train"],
]
MINIDOMAINNET_UNSCHEDULED = ["truck", "umbrella", "vase", "watermelon", "whale", "zebra"]

BENCHMARKS = {
    "office31": (OFFICE31_STEPS, OFFICE31_UNSCHEDULED),
    "officehome": (OFFICEHOME_STEPS, OFFICEHOME_UNSCHEDULED),
    "minidomainnet": (MINIDOMAINNET_STEPS, MINIDOMAINNET_UNSCHEDULED),
}
CARDINALITY = {k: sum(map(len, s)) + len(u) for k, (s, u) in BENCHMARKS.items()}


def canonical_key(name: str) -> str:
    """Spelling-insensitive key: ``"Exit_Sign"``, ``"exit sign"`` and ``"ExitSign"`` agree."""
    return re.sub(r"[^0-9a-z]", "", name.lower())


@dataclass
class StepSchedule:
    steps: list[list[int]]
    class_names: list[str]
    benchmark_id: str
    folder_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.folder_names:
            self.folder_names = list(self.class_names)
        C = len(self.class_names)
        seen: set[int] = set()
        for t, step in enumerate(self.steps):
            bad = [c for c in step if not 0 <= c < C]
            if bad:
                raise ConfigurationError(f"step {t} has class indices outside [0, {C}): {bad}")
            if seen & set(step):
                raise ConfigurationError(f"step {t} overlaps earlier steps on {sorted(seen & set(step))}")
            seen |= set(step)

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def C(self) -> int:
        return len(self.class_names)

    def step_class_names(self, t: int) -> list[str]:
        return [self.class_names[c] for c in self.steps[t]]

    def seen_classes(self, t: int) -> list[int]:
        return [c for s in self.steps[: t + 1] for c in s]

    def step_of_class(self) -> dict[int, int]:
        return {c: t for t, s in enumerate(self.steps) for c in s}

    def to_dict(self) -> dict:
        return {
            "benchmark_id": self.benchmark_id,
            "class_names": self.class_names,
            "folder_names": self.folder_names,
            "steps": self.steps,
            "step_class_names": [self.step_class_names(t) for t in range(self.T)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepSchedule":
        return cls([list(s) for s in d["steps"]], list(d["class_names"]), d["benchmark_id"], list(d.get("folder_names") or []))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "StepSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _chunks(n: int, size: int) -> list[list[int]]:
    return [list(range(i, min(i + size, n))) for i in range(0, n, size)]


def build_schedule(benchmark: str, class_names: list[str] | None = None, step_size: int | None = None) -> StepSchedule:
    """Schedule for ``benchmark``.

    For the published benchmarks ``class_names`` (e.g. dataset folder names)
    only has to match the class universe up to spelling; class indices
    follow the published step order. ``synthetic`` chunks ``class_names``
    in the given order into steps of ``step_size``.
    """
    if benchmark == "synthetic":
        if not class_names:
            raise ConfigurationError("the synthetic schedule needs class names")
        size = step_size or len(class_names)
        return StepSchedule(_chunks(len(class_names), size), list(class_names), "synthetic")
    if benchmark not in BENCHMARKS:
        raise ConfigurationError(f"unknown benchmark {benchmark!r}; expected one of {sorted(BENCHMARKS)} or 'synthetic'")
    steps, unscheduled = BENCHMARKS[benchmark]
    universe = [c for s in steps for c in s] + unscheduled
    folder_names = list(universe)
    if class_names is not None:
        if len(class_names) != len(universe):
            raise ConfigurationError(f"{benchmark} has {len(universe)} classes, got {len(class_names)}")
        by_key = {canonical_key(n): n for n in class_names}
        missing = [u for u in universe if canonical_key(u) not in by_key]
        if missing or len(by_key) != len(class_names):
            raise ConfigurationError(f"class names do not match the {benchmark} class universe; unmatched: {missing}")
        folder_names = [by_key[canonical_key(u)] for u in universe]
    idx_steps, i = [], 0
    for s in steps:
        idx_steps.append(list(range(i, i + len(s))))
        i += len(s)
    return StepSchedule(idx_steps, universe, benchmark, folder_names)
