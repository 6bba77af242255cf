"""The three training modes (dense, fixed sparse-MoE, switchable sparse-dense),
perplexity evaluation, MoEfication of dense checkpoints, and resume.

A run is a pure function of (seed, configs): parameter init and batch
sampling consume the main RNG stream, everything else (clustering seeds,
policy coins, validation batches) uses seeds derived from (run seed, purpose,
step), so checkpoint-resume replays and thread counts cannot perturb it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ssdlab.checkpoint import (
    Checkpoint,
    deserialize_scheduler,
    save_checkpoint,
    serialize_scheduler,
)
from ssdlab.clustering import Partition
from ssdlab.data import TokenizedCorpus, sample_batch, validation_batches
from ssdlab.flops import DenseMode, SmoeMode, train_step_flops
from ssdlab.metrics import MetricsRecord, export_metrics
from ssdlab.model import GPT, ModelConfig, lm_loss
from ssdlab.moe import MoEFFN
from ssdlab.numerics import (
    SEED_TAG_SMOE_INIT,
    AdamState,
    adam_step,
    derived_rng,
    make_rng,
    noam_lr,
    restore_rng,
    rng_state,
)
from ssdlab.scheduler import (
    PHASE_DENSE,
    PHASE_SPARSE,
    SchedulerState,
    SSDConfig,
    advance,
    cluster_all_layers,
    monitor_due,
    monitor_similarity,
    on_monitor,
    transition_dense_to_sparse,
    transition_sparse_to_dense,
)


@dataclass
class OptimizerConfig:
    base_lr: float = 0.5
    warmup: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self):
        return {f: getattr(self, f) for f in ("base_lr", "warmup", "beta1", "beta2", "eps")}


@dataclass
class DenseTrain:
    kind: str = "dense"

    def to_dict(self):
        return {"mode": "dense"}


@dataclass
class SmoeTrain:
    """Fixed sparse-MoE baseline: split at step 0 on a random balanced
    partition, sparse expert computation throughout. The (3, 2) default mirrors
    the compute-matched baseline; the gate is the same centroid gate the
    switchable mode uses rather than a learned router."""

    num_experts: int = 3
    active_experts: int = 2
    kind: str = "smoe"

    def to_dict(self):
        return {"mode": "smoe", "num_experts": self.num_experts,
                "active_experts": self.active_experts}


@dataclass
class SsdTrain:
    ssd: SSDConfig = field(default_factory=SSDConfig)
    num_experts: int = 32
    active_experts: int = 6
    reset_adam_on_transition: bool = False
    kind: str = "ssd"

    def to_dict(self):
        return {"mode": "ssd", "num_experts": self.num_experts,
                "active_experts": self.active_experts,
                "reset_adam_on_transition": self.reset_adam_on_transition,
                "ssd": self.ssd.to_dict()}


@dataclass
class RunConfig:
    total_steps: int = 1000
    batch_size: int = 8
    val_interval: int = 500
    val_sequences: int = 64
    val_batch_size: int = 8
    checkpoint_interval: int = 4000
    sparsity_interval: int = 1
    continuity_probes: bool = True
    out_dir: "str | None" = None

    def to_dict(self):
        return {f: getattr(self, f) for f in (
            "total_steps", "batch_size", "val_interval", "val_sequences",
            "val_batch_size", "checkpoint_interval", "sparsity_interval",
            "continuity_probes")}


def _mean_nll(model: GPT, batches: list) -> float:
    total, count = 0.0, 0
    for b in batches:
        loss, _, _ = lm_loss(model, b, want_grads=False)
        n = b.shape[0] * (b.shape[1] - 1)
        total += loss * n
        count += n
    return total / count


def _probe_loss(model: GPT, batch: np.ndarray) -> float:
    """Continuity probe: evaluation loss with every expert selected (K = N),
    which must match the dense computation exactly."""
    saved = [(lay, lay.active_experts) for lay in model.moe if lay is not None]
    for lay, _ in saved:
        lay.active_experts = lay.num_experts
    loss, _, _ = lm_loss(model, batch, want_grads=False)
    for lay, k in saved:
        lay.active_experts = k
    return loss


def _random_balanced_partition(d_ff: int, num_experts: int,
                               rng: np.random.Generator) -> Partition:
    assignment = np.repeat(np.arange(num_experts, dtype=np.int64), d_ff // num_experts)
    rng.shuffle(assignment)
    return Partition(assignment, num_experts)


def _active_moe_layout(model: GPT) -> "dict | None":
    layouts = [lay for lay in model.moe if lay is not None]
    if not layouts:
        return None
    return {
        "num_experts": layouts[0].num_experts,
        "active_experts": layouts[0].active_experts,
        "partitions": [lay.partition.assignment.tolist() for lay in model.moe],
    }


def _make_checkpoint(model, adam, rng, step, scheduler_state, ssd_cfg,
                     run_info) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        params={k: v.copy() for k, v in model.params.items()},
        step=step,
        rng=rng_state(rng),
        adam=AdamState(m={k: v.copy() for k, v in adam.m.items()},
                       v={k: v.copy() for k, v in adam.v.items()},
                       step_count=adam.step_count, beta1=adam.beta1,
                       beta2=adam.beta2, eps=adam.eps),
        moe_layout=_active_moe_layout(model),
        scheduler=None if scheduler_state is None else serialize_scheduler(scheduler_state),
        ssd_config=None if ssd_cfg is None else ssd_cfg.to_dict(),
        run_info=run_info,
    )


def train(model_cfg: ModelConfig, corpus: TokenizedCorpus, mode,
          opt: "OptimizerConfig | None" = None, seed: int = 0,
          run: "RunConfig | None" = None,
          resume_from: "Checkpoint | None" = None):
    """Train in one of the three modes; returns (final Checkpoint, metrics).

    resume_from picks up bit-exactly where the checkpoint left off: the tail
    of a resumed run is identical to the same steps of an uninterrupted one.
    """
    opt = opt or OptimizerConfig()
    run = run or RunConfig()
    if corpus.seq_len > model_cfg.max_seq_len:
        raise ValueError("corpus seq_len exceeds model max_seq_len")
    if corpus.manifest["vocab_size"] != model_cfg.vocab_size:
        raise ValueError(f"corpus vocab {corpus.manifest['vocab_size']} != "
                         f"model vocab {model_cfg.vocab_size}")
    is_ssd = mode.kind == "ssd"
    ssd_cfg = None
    if is_ssd:
        ssd_cfg = SSDConfig(**{**mode.ssd.to_dict(), "total_steps": run.total_steps})
        if model_cfg.d_ff % mode.num_experts != 0:
            raise ValueError("d_ff must be divisible by num_experts")
    if mode.kind == "smoe" and model_cfg.d_ff % mode.num_experts != 0:
        raise ValueError("d_ff must be divisible by num_experts")

    run_info_base = {"mode": mode.to_dict(), "optimizer": opt.to_dict(),
                     "run": run.to_dict(), "seed": seed}
    if run.out_dir:
        os.makedirs(run.out_dir, exist_ok=True)

    if resume_from is None:
        rng = make_rng(seed)
        model = GPT.init(model_cfg, rng)
        adam = AdamState.for_params(model.params, opt.beta1, opt.beta2, opt.eps)
        start_step = 0
        cumulative_flops = 0
        state = SchedulerState.fresh(model_cfg.n_layers) if is_ssd else None
        if is_ssd:
            # seed the per-layer partition chain on the initial weights
            monitor_similarity(model, state, mode.num_experts, seed, step=0)
        if mode.kind == "smoe":
            for layer in range(model_cfg.n_layers):
                p = _random_balanced_partition(
                    model_cfg.d_ff, mode.num_experts,
                    derived_rng(seed, SEED_TAG_SMOE_INIT, layer))
                model.moe[layer] = MoEFFN(model.ffn_weights(layer), p,
                                          mode.active_experts)
    else:
        ckpt = resume_from
        if ckpt.config.to_dict() != model_cfg.to_dict():
            raise ValueError("checkpoint model config differs from requested config")
        if ckpt.run_info.get("mode") != mode.to_dict():
            raise ValueError("checkpoint was trained in a different mode")
        if ckpt.run_info.get("optimizer") != opt.to_dict():
            raise ValueError("checkpoint was trained with a different optimizer config")
        model = ckpt.build_model()
        adam = ckpt.adam
        rng = restore_rng(ckpt.rng)
        start_step = ckpt.step
        cumulative_flops = ckpt.run_info["cumulative_flops"]
        state = deserialize_scheduler(ckpt.scheduler) if is_ssd else None

    val_set = validation_batches(corpus.val_tokens, corpus.seq_len,
                                 run.val_sequences, run.val_batch_size)
    probe_batch = val_set[0]
    records = []
    for step in range(start_step, run.total_steps):
        similarity = None
        if is_ssd:
            action = advance(state, ssd_cfg, step)
            if action == "merge":
                before = _probe_loss(model, probe_batch) if run.continuity_probes else None
                transition_sparse_to_dense(model, state)
                if run.continuity_probes:
                    after = _probe_loss(model, probe_batch)
                    state.events[-1]["loss_before"] = before
                    state.events[-1]["loss_after"] = after
            if monitor_due(state, ssd_cfg):
                similarity = monitor_similarity(model, state, mode.num_experts,
                                                seed, step)
                if on_monitor(state, ssd_cfg, similarity, step, seed):
                    before = _probe_loss(model, probe_batch) if run.continuity_probes else None
                    transition_dense_to_sparse(
                        model, state, mode.num_experts, mode.active_experts,
                        seed, step, adam=adam,
                        reset_adam=mode.reset_adam_on_transition)
                    if run.continuity_probes:
                        after = _probe_loss(model, probe_batch)
                        state.events[-1]["loss_before"] = before
                        state.events[-1]["loss_after"] = after
            phase = state.phase
        else:
            phase = PHASE_SPARSE if mode.kind == "smoe" else PHASE_DENSE

        batch = sample_batch(corpus.train_tokens, run.batch_size, corpus.seq_len, rng)
        loss, grads, hiddens = lm_loss(model, batch)
        lr = noam_lr(step + 1, opt.warmup, model_cfg.d_model, opt.base_lr)
        adam_step(model.params, grads, adam, lr)

        if phase == PHASE_SPARSE:
            step_mode = SmoeMode(mode.num_experts, mode.active_experts)
        else:
            step_mode = DenseMode()
        cumulative_flops += train_step_flops(model_cfg, step_mode,
                                             corpus.seq_len, run.batch_size)

        sparsity = None
        if run.sparsity_interval and step % run.sparsity_interval == 0:
            sparsity = [float((h == 0.0).mean()) for h in hiddens]
        ppl = None
        if (step + 1) % run.val_interval == 0 or step + 1 == run.total_steps:
            ppl = float(np.exp(_mean_nll(model, val_set)))
        records.append(MetricsRecord(step=step, phase=phase, loss=float(loss),
                                     ppl=ppl, sparsity=sparsity,
                                     similarity=similarity,
                                     flops=cumulative_flops, lr=lr))

        if is_ssd:
            state.steps_in_phase += 1
            if state.phase == PHASE_DENSE:
                state.last_dense_len += 1

        if run.out_dir and (step + 1) % run.checkpoint_interval == 0 \
                and step + 1 < run.total_steps:
            ck = _make_checkpoint(model, adam, rng, step + 1, state, ssd_cfg,
                                  {**run_info_base, "cumulative_flops": cumulative_flops})
            save_checkpoint(ck, os.path.join(run.out_dir, f"ckpt_{step + 1:08d}.bin"))

    final = _make_checkpoint(model, adam, rng, run.total_steps, state, ssd_cfg,
                             {**run_info_base, "cumulative_flops": cumulative_flops})
    if run.out_dir:
        save_checkpoint(final, os.path.join(run.out_dir, "final.bin"))
        export_metrics(records, os.path.join(run.out_dir, "metrics.jsonl"),
                       "jsonl", model_cfg.n_layers)
        with open(os.path.join(run.out_dir, "run.json"), "w") as f:
            json.dump({**run_info_base, "n_layers": model_cfg.n_layers,
                       "cumulative_flops": cumulative_flops}, f, indent=2)
        events = state.events if state is not None else []
        with open(os.path.join(run.out_dir, "events.jsonl"), "w") as f:
            for e in events:
                f.write(json.dumps(e, sort_keys=True) + "\n")
    return final, records


# -----------------------------------------------------------------------------
# Evaluation and MoEfication
# -----------------------------------------------------------------------------


def _stored_partitions(ckpt: Checkpoint) -> "list | None":
    """Partitions carried by the checkpoint: the active sparse layout if any,
    else the scheduler's chain (the structure a switchable run trained with)."""
    if ckpt.moe_layout is not None:
        n = ckpt.moe_layout["num_experts"]
        return [Partition(np.array(a), n) for a in ckpt.moe_layout["partitions"]]
    if ckpt.scheduler is not None:
        parts = deserialize_scheduler(ckpt.scheduler).partitions
        if all(p is not None for p in parts):
            return parts
    return None


def eval_perplexity(ckpt: Checkpoint, corpus: TokenizedCorpus,
                    sparse_k: "int | None" = None, dynamic_ratio: float = 0.0,
                    num_experts: "int | None" = None, moefy_seed: int = 0,
                    val_sequences: int = 64, val_batch_size: int = 8) -> float:
    """exp(mean token NLL) on the fixed validation batches.

    Without sparse_k the model computes densely. With sparse_k the stored
    expert structure is reused when the checkpoint carries one; a plain dense
    checkpoint is MoEfied on the fly (cluster + split), which needs
    num_experts. dynamic_ratio > 0 truncates low-score candidates per batch.
    """
    model = GPT(ckpt.config, {k: v.copy() for k, v in ckpt.params.items()})
    if sparse_k is not None:
        partitions = _stored_partitions(ckpt)
        if partitions is None:
            if num_experts is None:
                raise ValueError("dense checkpoint carries no expert structure; "
                                 "pass num_experts to MoEfy it")
            outcomes = cluster_all_layers(model, [None] * ckpt.config.n_layers,
                                          num_experts, moefy_seed, step=0)
            partitions = [o.partition for o in outcomes]
        n = partitions[0].num_clusters
        if not 1 <= sparse_k <= n:
            raise ValueError(f"sparse_k must be in [1, {n}]")
        for layer, p in enumerate(partitions):
            lay = MoEFFN(model.ffn_weights(layer), p, sparse_k)
            lay.dynamic_ratio = dynamic_ratio
            model.moe[layer] = lay
    val_set = validation_batches(corpus.val_tokens, corpus.seq_len,
                                 val_sequences, val_batch_size)
    return float(np.exp(_mean_nll(model, val_set)))


def moefy_checkpoint(ckpt: Checkpoint, num_experts: int,
                     seed: int = 0) -> Checkpoint:
    """Cluster + split a dense checkpoint so it carries an expert structure."""
    model = GPT(ckpt.config, {k: v.copy() for k, v in ckpt.params.items()})
    if ckpt.config.d_ff % num_experts != 0:
        raise ValueError("d_ff must be divisible by num_experts")
    outcomes = cluster_all_layers(model, [None] * ckpt.config.n_layers,
                                  num_experts, seed, step=0)
    layout = {
        "num_experts": num_experts,
        "active_experts": num_experts,
        "partitions": [o.partition.assignment.tolist() for o in outcomes],
    }
    return Checkpoint(config=ckpt.config, params=ckpt.params, step=ckpt.step,
                      rng=ckpt.rng, adam=ckpt.adam, moe_layout=layout,
                      scheduler=ckpt.scheduler, ssd_config=ckpt.ssd_config,
                      run_info={**ckpt.run_info, "moefied": num_experts})
