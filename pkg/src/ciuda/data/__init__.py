from .schedules import StepSchedule, build_schedule
from .datasets import (
    AccessLog,
    ExampleStore,
    LabeledExample,
    Manifest,
    TaintedLabel,
    UnlabeledExample,
    build_manifest,
    make_source_loader,
    make_step_stream,
    source_examples,
    target_examples,
)
from .cache import FeatureCache, cache_features
