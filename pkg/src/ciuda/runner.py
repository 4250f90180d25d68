"""Step-wise training loop: dictionary lifecycle, batch pairing, attention-consistent selection, losses and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attributes import AttributeDictionary, init_keys_kmeanspp, select_top_l_batch, update_target_keys_ema
from .config import RunConfig, dump_config
from .data.datasets import (
    AccessLog,
    CyclingSourceLoader,
    ExampleStore,
    Manifest,
    build_manifest,
    make_step_stream,
    source_examples,
    target_examples,
)
from .data.schedules import StepSchedule, build_schedule
from .data.synthetic import make_synthetic
from .encoders import build_encoder
from .encoders.base import Encoder
from .errors import ConfigurationError, IngestionError, LoadError, NumericalError
from .evaluation import MetricsReport, PredictionRecord, TaskMetrics, predict_batch, write_predictions
from .objectives import (
    DebiasState,
    debias_and_pseudolabel,
    loss_con,
    loss_con_target,
    loss_div,
    loss_hp,
    loss_sup_source,
    loss_sup_target,
    total_loss,
)
from .prompts import ClassProbabilities, class_probs, prompt_embeddings
from .vac import cross_domain_selection, dump_heatmaps

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def cosine_lr(lr0: float, i: int, total: int) -> float:
    """Cosine decay from ``lr0`` at iteration 0 to 0 at iteration ``total - 1``."""
    if total <= 1:
        return lr0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * i / (total - 1)))


def _iteration_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class RunState:
    source: AttributeDictionary
    target: AttributeDictionary | None
    debias: DebiasState
    next_step: int = 0
    pretrained: bool = False
    records: list[PredictionRecord] = field(default_factory=list)
    epoch_losses: dict[str, list[float]] = field(default_factory=dict)
    optimizer_state: dict | None = None


@dataclass
class RunResult:
    report: MetricsReport
    records: list[PredictionRecord]
    state: RunState
    access_log: AccessLog
    seconds: float
    run_dir: Path | None = None


class Runner:
    """Owns the encoder, data, dictionaries and the training loop for one adaptation task."""

    def __init__(self, cfg: RunConfig, run_dir=None):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        if cfg.backend == "toy":
            self.encoder: Encoder = build_encoder("toy", **cfg.toy.model_dump())
        else:
            self.encoder = build_encoder("clip", cfg.checkpoint)
        self.tau = cfg.tau if cfg.tau is not None else self.encoder.spec.temperature
        self.access_log = AccessLog()
        self._load_data()
        names = [n.replace("_", " ") for n in self.schedule.class_names]
        self.class_tokens = [self.encoder.class_tokens(n) for n in names]
        self.handcrafted = self.encoder.embed_handcrafted_classnames(names, cfg.template)
        self.encoder.check_prompt_length(cfg.L * cfg.M, max(t.shape[0] for t in self.class_tokens))
        # the frozen tap is cheap to keep for the toy backend; real images are re-encoded
        self._memo: dict[str, torch.Tensor] | None = {} if cfg.backend == "toy" else None
        self._loss_file = None

    # -- data ---------------------------------------------------------------
    def _load_data(self):
        cfg = self.cfg
        if cfg.benchmark_id == "synthetic":
            bench = make_synthetic(self.encoder, **cfg.synthetic.model_dump())
            self.schedule: StepSchedule = bench.schedule
            manifests = bench.manifests()
            self.source_manifest, self.target_manifest = manifests["source"], manifests["target"]
            self.store = ExampleStore(None, access_log=self.access_log, memory=bench.memory())
            return
        root = Path(cfg.data_root)
        src_dir = root / cfg.source_domain
        if not src_dir.is_dir():
            raise IngestionError(f"source domain folder {src_dir} does not exist")
        folders = sorted(p.name for p in src_dir.iterdir() if p.is_dir())
        self.schedule = build_schedule(cfg.benchmark_id, folders)
        self.source_manifest = build_manifest(root, cfg.source_domain, self.schedule, hash_files=False)
        self.target_manifest = build_manifest(root, cfg.target_domain, self.schedule, hash_files=False)
        prep = getattr(self.encoder, "preprocessing", None)
        self.store = ExampleStore(root, preprocessing=prep, access_log=self.access_log)

    def tokens(self, examples, purpose: str) -> torch.Tensor:
        """Frozen tap activations ``[B, T, Dtap]``; every use is logged."""
        out, pending = [None] * len(examples), []
        for i, ex in enumerate(examples):
            if self._memo is not None and ex.example_id in self._memo:
                self.store.touch(ex, purpose)
                out[i] = self._memo[ex.example_id]
            else:
                pending.append((i, ex, self.encoder.prepare_input(self.store.read(ex, purpose))))
        if pending:
            with torch.no_grad():
                toks = self.encoder.tap(torch.stack([p for _, _, p in pending]))
            for (i, ex, _), tok in zip(pending, toks):
                out[i] = tok
                if self._memo is not None:
                    self._memo[ex.example_id] = tok
        return torch.stack(out)

    def features(self, examples, purpose: str, batch_size: int = 256) -> torch.Tensor:
        chunks = []
        for i in range(0, len(examples), batch_size):
            with torch.no_grad():
                chunks.append(self.encoder.features_from_tap(self.tokens(examples[i : i + batch_size], purpose)))
        return torch.cat(chunks)

    # -- state --------------------------------------------------------------
    def init_state(self) -> RunState:
        cfg = self.cfg
        d = self.encoder.spec.prompt_token_dim
        self.access_log.current_step = None
        self.access_log.stage = "pretrain" if cfg.mode == "source_free" else "joint"
        src_feats = self.features(source_examples(self.source_manifest), "init")
        ks = init_keys_kmeanspp(src_feats, cfg.N, seed=cfg.seed)
        source = AttributeDictionary.initialize("source", ks, cfg.M, d, seed=_iteration_seed(cfg.seed, 1), dtype=self.encoder.dtype)
        debias = DebiasState.uniform(self.schedule.C, cfg.debias_momentum, cfg.debias_factor, dtype=self.encoder.dtype)
        return RunState(source, None, debias)

    def _start_target(self, state: RunState, t: int, stream) -> None:
        """Create the target dictionary at the first step, move its keys afterwards."""
        cfg = self.cfg
        feats = self.features(stream, "init")
        if state.target is None:
            kt = init_keys_kmeanspp(feats, cfg.N, seed=cfg.seed + 1)
            d = self.encoder.spec.prompt_token_dim
            state.target = AttributeDictionary.initialize("target", kt, cfg.M, d, seed=_iteration_seed(cfg.seed, 2), dtype=self.encoder.dtype, step=t)
        else:
            update_target_keys_ema(state.target, feats, mu=cfg.key_ema, seed=cfg.seed + 1 + t)

    # -- probabilities ------------------------------------------------------
    def _probs(self, z, values, indices, provenance: str):
        emb = prompt_embeddings(self.encoder, values, indices, self.class_tokens)
        return ClassProbabilities(class_probs(z, emb, self.tau), provenance), emb

    def _domain_pass(self, tokens, own: AttributeDictionary, other: AttributeDictionary, own_tag: str, dump_to=None, ids=None):
        """Own-dictionary and cross-domain probabilities for one batch of images."""
        cfg = self.cfg
        tokens = tokens.detach().requires_grad_(True)
        with torch.no_grad():
            z = self.encoder.features_from_tap(tokens)
        sel = select_top_l_batch(own.keys, z, cfg.L)
        res = cross_domain_selection(self.encoder, tokens, own.values, other.values, sel.indices, self.tau, return_maps=dump_to is not None)
        if dump_to is not None:
            dump_heatmaps(dump_to, res[3], res[4], sel.indices, self.encoder.spec.patch_grid, ids)
        cross_tag = {"ss": "st", "tt": "ts"}[own_tag]
        p_own, emb_own = self._probs(z, own.values, sel.indices, own_tag)
        p_cross, _ = self._probs(z, other.values, res[0], cross_tag)
        return p_own, p_cross, emb_own

    # -- training -----------------------------------------------------------
    def _optimizer(self, params):
        cfg = self.cfg
        return torch.optim.SGD(params, lr=cfg.lr0, momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay)

    def _backward(self, parts: dict, mode: str, optimizer, batch_ids):
        cfg = self.cfg
        try:
            br = total_loss(parts, cfg.lambda1, cfg.lambda2, cfg.lambda3, mode)
        except NumericalError:
            self._dump_nan(parts, batch_ids)
            raise
        optimizer.zero_grad(set_to_none=True)
        br.total_tensor.backward()
        optimizer.step()
        return br

    def _dump_nan(self, parts, batch_ids):
        info = {"parts": {k: float(torch.as_tensor(v).detach()) for k, v in parts.items()}, "batch": batch_ids, "step": self.access_log.current_step}
        log.error("non-finite loss: %s", info["parts"])
        if self.run_dir is not None:
            (self.run_dir / "nan_dump.json").write_text(json.dumps(info, indent=1) + "\n")

    def _log_iteration(self, row: dict):
        if self._loss_file is not None:
            self._loss_file.write(json.dumps(row) + "\n")

    def _epoch_order(self, n: int, *seed_parts: int) -> np.ndarray:
        return np.random.default_rng(_iteration_seed(self.cfg.seed, *seed_parts)).permutation(n)

    def run_step(self, state: RunState, t: int) -> RunState:
        """Joint adaptation on target step ``t`` with the labelled source alongside."""
        cfg = self.cfg
        log_ = self.access_log
        log_.current_step, log_.stage = t, "joint"
        stream = make_step_stream(self.schedule, t, self.target_manifest)
        if not stream:
            log.warning("target step %d has no examples; skipping", t)
            state.next_step = t + 1
            return state
        self._start_target(state, t, stream)
        src, tgt = state.source, state.target
        opt = self._optimizer([src.values, tgt.values])
        loader = CyclingSourceLoader(source_examples(self.source_manifest), cfg.batch_size, _iteration_seed(cfg.seed, 3, t))
        per_epoch = math.ceil(len(stream) / cfg.batch_size)
        total_iters = per_epoch * cfg.epochs_per_step
        epoch_means, it = [], 0
        for epoch in range(cfg.epochs_per_step):
            order = self._epoch_order(len(stream), 4, t, epoch)
            totals = []
            for b in range(per_epoch):
                lr = cosine_lr(cfg.lr0, it, total_iters)
                for g in opt.param_groups:
                    g["lr"] = lr
                tb = [stream[j] for j in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                sb = loader.next_batch()
                ys = torch.tensor([e.label for e in sb])
                dump = None
                if cfg.dump_heatmaps and self.run_dir is not None and it == 0:
                    dump = self.run_dir / f"heatmaps_step{t + 1}.npz"
                p_ss, p_st, emb_ss = self._domain_pass(self.tokens(sb, "train"), src, tgt, "ss")
                p_tt, p_ts, _ = self._domain_pass(self.tokens(tb, "train"), tgt, src, "tt", dump, [e.example_id for e in tb])
                mask, pseudo, state.debias = debias_and_pseudolabel(p_tt.probs, state.debias, cfg.gamma)
                parts = {
                    "sup_s": loss_sup_source(p_ss, ys),
                    "sup_t": loss_sup_target(p_tt, mask, pseudo),
                    "con": loss_con(p_ss, p_st, p_tt, p_ts),
                    "hp": loss_hp(emb_ss, self.handcrafted),
                    "div": loss_div(self.encoder.encode_bare(src.values)) + loss_div(self.encoder.encode_bare(tgt.values)),
                }
                br = self._backward(parts, "joint", opt, [e.example_id for e in tb])
                totals.append(br.total)
                self._log_iteration({"stage": "joint", "step": t + 1, "epoch": epoch + 1, "iter": it, "lr": lr, "n_pseudo": int(mask.sum()), **br.as_dict()})
                it += 1
            epoch_means.append(float(np.mean(totals)))
        state.epoch_losses[f"step{t + 1}"] = epoch_means
        state.optimizer_state = opt.state_dict()
        state.next_step = t + 1
        return state

    def pretrain_source(self, state: RunState) -> RunState:
        """Source-only stage: supervised, hand-crafted-prompt and diversity terms on the source dictionary."""
        cfg = self.cfg
        self.access_log.current_step, self.access_log.stage = None, "pretrain"
        src = state.source
        examples = source_examples(self.source_manifest)
        opt = self._optimizer([src.values])
        per_epoch = math.ceil(len(examples) / cfg.batch_size)
        total_iters = per_epoch * cfg.epochs_per_step
        epoch_means, it = [], 0
        for epoch in range(cfg.epochs_per_step):
            order = self._epoch_order(len(examples), 5, epoch)
            totals = []
            for b in range(per_epoch):
                lr = cosine_lr(cfg.lr0, it, total_iters)
                for g in opt.param_groups:
                    g["lr"] = lr
                sb = [examples[j] for j in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                tokens = self.tokens(sb, "train")
                with torch.no_grad():
                    z = self.encoder.features_from_tap(tokens)
                sel = select_top_l_batch(src.keys, z, cfg.L)
                p_ss, emb = self._probs(z, src.values, sel.indices, "ss")
                parts = {
                    "sup_s": loss_sup_source(p_ss, torch.tensor([e.label for e in sb])),
                    "hp": loss_hp(emb, self.handcrafted),
                    "div": loss_div(self.encoder.encode_bare(src.values)),
                }
                br = self._backward(parts, "source_pretrain", opt, [e.example_id for e in sb])
                totals.append(br.total)
                self._log_iteration({"stage": "pretrain", "epoch": epoch + 1, "iter": it, "lr": lr, **br.as_dict()})
                it += 1
            epoch_means.append(float(np.mean(totals)))
        state.epoch_losses["pretrain"] = epoch_means
        state.pretrained = True
        return state

    def deploy_step(self, state: RunState, t: int) -> RunState:
        """Target-only adaptation of step ``t``; the source dictionary is read but never updated."""
        cfg = self.cfg
        log_ = self.access_log
        log_.current_step, log_.stage = t, "deploy"
        stream = make_step_stream(self.schedule, t, self.target_manifest)
        if not stream:
            log.warning("target step %d has no examples; skipping", t)
            state.next_step = t + 1
            return state
        self._start_target(state, t, stream)
        frozen_src = AttributeDictionary("source", state.source.keys, state.source.values.detach(), keys_frozen=True)
        frozen_src.keys = state.source.keys
        frozen_src.values.requires_grad_(False)
        tgt = state.target
        opt = self._optimizer([tgt.values])
        per_epoch = math.ceil(len(stream) / cfg.batch_size)
        total_iters = per_epoch * cfg.epochs_per_step
        epoch_means, it = [], 0
        for epoch in range(cfg.epochs_per_step):
            order = self._epoch_order(len(stream), 4, t, epoch)
            totals = []
            for b in range(per_epoch):
                lr = cosine_lr(cfg.lr0, it, total_iters)
                for g in opt.param_groups:
                    g["lr"] = lr
                tb = [stream[j] for j in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                dump = None
                if cfg.dump_heatmaps and self.run_dir is not None and it == 0:
                    dump = self.run_dir / f"heatmaps_step{t + 1}.npz"
                p_tt, p_ts, _ = self._domain_pass(self.tokens(tb, "train"), tgt, frozen_src, "tt", dump, [e.example_id for e in tb])
                mask, pseudo, state.debias = debias_and_pseudolabel(p_tt.probs, state.debias, cfg.gamma)
                parts = {
                    "sup_t": loss_sup_target(p_tt, mask, pseudo),
                    "con": loss_con_target(p_tt, p_ts),
                    "div": loss_div(self.encoder.encode_bare(tgt.values)),
                }
                br = self._backward(parts, "target_deploy", opt, [e.example_id for e in tb])
                totals.append(br.total)
                self._log_iteration({"stage": "deploy", "step": t + 1, "epoch": epoch + 1, "iter": it, "lr": lr, "n_pseudo": int(mask.sum()), **br.as_dict()})
                it += 1
            epoch_means.append(float(np.mean(totals)))
        state.epoch_losses[f"step{t + 1}"] = epoch_means
        state.optimizer_state = opt.state_dict()
        state.next_step = t + 1
        return state

    # -- evaluation ---------------------------------------------------------
    def evaluate(self, state: RunState, t: int) -> list[PredictionRecord]:
        """Predictions for every target example of steps ``<= t``."""
        examples = [e for e in target_examples(self.schedule, self.target_manifest) if e.step <= t]
        z = self.features(examples, "eval")
        pred = torch.cat([
            predict_batch(z[i : i + 512], state.target, self.class_tokens, self.encoder, self.cfg.L, self.tau)
            for i in range(0, len(examples), 512)
        ])
        return [
            PredictionRecord(e.example_id, e.true_label.reveal_for_evaluation(), int(p), t, e.step)
            for e, p in zip(examples, pred.tolist())
        ]

    def report(self, records) -> MetricsReport:
        tm = TaskMetrics.from_records(records, self.schedule.T, cumulative=self.cfg.step_eval == "cumulative")
        return MetricsReport(self.cfg.benchmark_id, {self.cfg.task_name: tm})

    # -- checkpoints --------------------------------------------------------
    def save_checkpoint(self, state: RunState, path) -> Path:
        path = Path(path)
        torch.save(
            {
                "version": CHECKPOINT_VERSION,
                "config_digest": self.cfg.digest(),
                "next_step": state.next_step,
                "pretrained": state.pretrained,
                "source": {"keys": state.source.keys, "values": state.source.values.detach(), "created_at_step": state.source.created_at_step},
                "target": None if state.target is None else {"keys": state.target.keys, "values": state.target.values.detach(), "created_at_step": state.target.created_at_step},
                "debias_q": state.debias.q,
                "records": [r.__dict__ for r in state.records],
                "epoch_losses": state.epoch_losses,
                "optimizer": state.optimizer_state,
                "torch_rng": torch.get_rng_state(),
                "numpy_rng": np.random.get_state(),
            },
            path,
        )
        return path

    def load_checkpoint(self, path) -> RunState:
        try:
            ck = torch.load(path, weights_only=False)
        except Exception as e:  # noqa: BLE001 - any unreadable file is a load error
            raise LoadError(f"cannot read checkpoint {path}: {e}") from e
        if ck.get("version") != CHECKPOINT_VERSION:
            raise LoadError(f"checkpoint version mismatch: expected {CHECKPOINT_VERSION}, got {ck.get('version')}")
        if ck["config_digest"] != self.cfg.digest():
            raise LoadError("checkpoint was written under a different configuration")

        def _dict(domain, d):
            out = AttributeDictionary(domain, d["keys"], d["values"], d["created_at_step"])
            out.keys = d["keys"].clone()
            return out

        cfg = self.cfg
        state = RunState(
            source=_dict("source", ck["source"]),
            target=None if ck["target"] is None else _dict("target", ck["target"]),
            debias=DebiasState(ck["debias_q"].clone(), cfg.debias_momentum, cfg.debias_factor),
            next_step=ck["next_step"],
            pretrained=ck["pretrained"],
            records=[PredictionRecord(**r) for r in ck["records"]],
            epoch_losses=ck["epoch_losses"],
            optimizer_state=ck["optimizer"],
        )
        torch.set_rng_state(ck["torch_rng"])
        np.random.set_state(ck["numpy_rng"])
        return state

    # -- orchestration ------------------------------------------------------
    def _write_run_metadata(self):
        d = self.run_dir
        d.mkdir(parents=True, exist_ok=True)
        (d / "checkpoints").mkdir(exist_ok=True)
        dump_config(self.cfg, d / "config.yaml")
        self.schedule.save(d / "schedule.json")
        self.source_manifest.save(d / "manifest_source.json")
        self.target_manifest.save(d / "manifest_target.json")
        (d / "encoder.json").write_text(json.dumps({"backbone_id": self.encoder.spec.backbone_id, "weight_checksum": self.encoder.weight_checksum(), "tau": self.tau}, indent=1) + "\n")

    def run(self, state: RunState | None = None, stop_after: int | None = None) -> RunResult:
        """Train and evaluate over all steps (or up to ``stop_after`` steps), resuming from ``state`` if given."""
        cfg = self.cfg
        t0 = time.perf_counter()
        torch.manual_seed(cfg.seed)
        np.random.seed(cfg.seed % (2**32))
        if self.run_dir is not None:
            self._write_run_metadata()
            self._loss_file = open(self.run_dir / "loss_log.jsonl", "a")
        try:
            if state is None:
                state = self.init_state()
            if cfg.mode == "source_free" and not state.pretrained:
                state = self.pretrain_source(state)
            last = self.schedule.T if stop_after is None else min(self.schedule.T, stop_after)
            for t in range(state.next_step, last):
                state = self.run_step(state, t) if cfg.mode == "joint" else self.deploy_step(state, t)
                if state.target is None:
                    raise ConfigurationError(f"no target data up to step {t + 1}; cannot evaluate")
                state.records.extend(self.evaluate(state, t))
                if self.run_dir is not None:
                    self.save_checkpoint(state, self.run_dir / "checkpoints" / f"step{t + 1}.pt")
        finally:
            if self._loss_file is not None:
                self._loss_file.close()
                self._loss_file = None
        done = stop_after is None or stop_after >= self.schedule.T
        report = self.report(state.records) if done else None
        if self.run_dir is not None and done:
            write_predictions(state.records, self.run_dir / "predictions.csv")
        return RunResult(report, state.records, state, self.access_log, time.perf_counter() - t0, self.run_dir)


def full_run(cfg: RunConfig, run_dir=None, resume=None) -> RunResult:
    runner = Runner(cfg, run_dir)
    state = runner.load_checkpoint(resume) if resume is not None else None
    return runner.run(state)


def load_manifest_pair(run_dir) -> tuple[Manifest, Manifest]:
    d = Path(run_dir)
    return Manifest.load(d / "manifest_source.json"), Manifest.load(d / "manifest_target.json")
