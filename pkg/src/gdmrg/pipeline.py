"""
Run orchestration: two-stage training, evaluation, phi sweep, ablation
grids, topology dumps and the gradient suite. Every function takes a
validated RunConfig; only the CLI turns exceptions into exit codes.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from .config import RunConfig, save_config
from .datagen import Dataset, generate_splits, read_splits
from .decoder import Vocab, encode_report, generate, nll_loss, pad_batch, total_objective
from .dualcls import aux_loss, decide_and_prompt, main_loss, ots, state_class_weights, write_thresholds
from .errors import DataError
from .evalkit import MetricsReport, build_report, ce_metrics, roc_table, write_metrics_csv
from .fusion import curriculum_cap
from .graphtopo import (
    NormalizedAdjacency,
    build_adjacency,
    count_cooccurrence,
    dump_matrices,
    geometric_normalize,
    spectral_radius,
    vanilla_adjacency,
)
from .labels import ClinicalState, disease_names
from .model import GdmrgModel
from .numcore import LR_GROUPS, GroupedAdamW, PlateauScheduler, Rng, build_optimizer, check_finite, finite_diff_check, seed_everything
from .tki import mean_centered_cosine, pair_similarity, pgm_from_similarity

CKPT_NAME = "model.ckpt"
VOCAB_NAME = "vocab.txt"
EVAL_ONLY_KEYS = ("use_ots", "beam_width", "show_prompt", "dump_attention", "out_dir")
LOG_FIELDS = ("epoch", "stage", "loss", "ce", "aux", "nll", "val_micro_f1", *(f"lr_{g}" for g in LR_GROUPS))


# ---------------- data ----------------

def gen_data(cfg: RunConfig) -> dict:
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    print(f"합성 데이터 생성: {sizes} -> {cfg.data_dir}")
    _, manifest = generate_splits(cfg.gen_config(), sizes, cfg.seed, cfg.data_dir)
    if "probe_auc" in manifest:
        print("[PROBE] head-class linear probe AUC:")
        print(pd.Series(manifest["probe_auc"], name="auc").to_frame().to_markdown(floatfmt=".4f"))
    return manifest


def load_splits(cfg: RunConfig, splits: Sequence[str] = ("train", "val", "test")) -> dict[str, Dataset]:
    root = Path(cfg.data_dir)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root} (run `gdmrg gen-data` first)")
    return read_splits(root, splits)


def build_graph(cfg: RunConfig, train_binary: np.ndarray) -> NormalizedAdjacency | None:
    counts = count_cooccurrence(np.asarray(train_binary)[:, : cfg.n_nodes])
    if cfg.graph_mode == "tki":
        return build_adjacency(geometric_normalize(counts), cfg.phi)
    if cfg.graph_mode == "vanilla":
        return vanilla_adjacency(counts)
    return None


@dataclass
class Batch:
    raw: torch.Tensor
    states: torch.Tensor
    binary: torch.Tensor
    tokens: torch.Tensor | None = None


def make_batch(data: Dataset, idx: np.ndarray, cfg: RunConfig, vocab: Vocab | None = None) -> tuple[Batch, int]:
    n = cfg.n_nodes
    states = data.states[idx, :n]
    batch = Batch(
        raw=torch.as_tensor(data.features[idx], dtype=torch.float64),
        states=torch.as_tensor(states, dtype=torch.long),
        binary=torch.as_tensor(data.binary(cfg.unc_positive)[idx, :n], dtype=torch.float64),
    )
    truncated = 0
    if vocab is not None:
        seqs = []
        for row, i in zip(states, idx):
            ids, cut = encode_report(vocab, row, data.reports[i], cfg.max_len)
            seqs.append(ids)
            truncated += int(cut)
        batch.tokens = pad_batch(seqs)
    return batch, truncated


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterable[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start: start + batch_size]


# ---------------- inference ----------------

@dataclass
class Predictions:
    logits: torch.Tensor
    probs: np.ndarray
    prompts: np.ndarray


@torch.no_grad()
def predict(model: GdmrgModel, data: Dataset, cfg: RunConfig) -> Predictions:
    model.eval()
    logits, probs = [], []
    for idx in batches(len(data), cfg.batch_size):
        out = model.classify(torch.as_tensor(data.features[idx], dtype=torch.float64))
        logits.append(out.logits)
        probs.append(out.p.numpy())
    if not logits:
        empty = torch.zeros(0, cfg.n_nodes, 4, dtype=torch.float64)
        return Predictions(empty, np.zeros((0, cfg.n_nodes)), np.zeros((0, cfg.n_nodes), dtype=np.int64))
    all_logits = torch.cat(logits)
    all_probs = np.concatenate(probs)
    _, prompts = decide_and_prompt(all_logits, torch.as_tensor(all_probs))
    return Predictions(all_logits, all_probs, prompts)


def val_micro_f1(model: GdmrgModel, data: Dataset, cfg: RunConfig) -> float:
    if len(data) == 0:
        return 0.0
    pred = predict(model, data, cfg)
    truth = data.binary(cfg.unc_positive)[:, : cfg.n_nodes]
    return ce_metrics((pred.probs >= 0.5).astype(np.int64), truth).micro_f1


# ---------------- training ----------------

@dataclass
class TrainResult:
    model: GdmrgModel
    vocab: Vocab
    graph: NormalizedAdjacency | None
    log: pd.DataFrame
    run_dir: Path


def _epoch_line(row: dict, n_epochs: int) -> str:
    lrs = " ".join(f"lr({g})={row[f'lr_{g}']:.3g}" for g in LR_GROUPS)
    return (
        f"[epoch {row['epoch']}/{n_epochs}] stage={row['stage']} loss={row['loss']:.4f} ce={row['ce']:.4f} "
        f"aux={row['aux']:.4f} nll={row['nll']:.4f} val_micro_f1={row['val_micro_f1']:.4f} {lrs}"
    )


def _optimizer(cfg: RunConfig, model: GdmrgModel, include_decoder: bool) -> GroupedAdamW:
    return build_optimizer(
        model.param_store(include_decoder),
        cfg.lr,
        cfg.lr_multipliers(),
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        weight_decay=cfg.weight_decay,
    )


def train(cfg: RunConfig, splits: dict[str, Dataset] | None = None, run_dir: str | Path | None = None) -> TrainResult:
    """
    사용법:
        result = train(load_config("src/train/gdmrg_desk.yaml"))
        result.run_dir / "model.ckpt"

    Stage 1 trains the classifier streams with the decoder left out of the
    optimizer; stage 2 trains the full objective with the plateau rule on
    validation micro-F1 and the gate curriculum.
    """
    run_dir = Path(run_dir or cfg.out_dir)
    splits = splits or load_splits(cfg)
    train_set, val_set = splits["train"], splits["val"]
    if len(train_set) == 0:
        raise DataError(f"{cfg.data_dir}: training split is empty")

    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "effective_config.yaml")
    seed_everything(cfg.seed)

    graph = build_graph(cfg, train_set.binary(cfg.unc_positive))
    vocab = Vocab.build(train_set.reports)
    vocab.save(run_dir / VOCAB_NAME)
    model = GdmrgModel(cfg, None if graph is None else graph.a_tilde, len(vocab))
    class_weights = state_class_weights(train_set.states[:, : cfg.n_nodes]) if cfg.main_loss == "wfl" else None
    tasl = cfg.tasl()

    print(f"학습 시작: train={len(train_set)} val={len(val_set)} graph={cfg.graph_mode} phi={cfg.phi} "
          f"aux={cfg.aux_loss} main={cfg.main_loss} mask={cfg.mask_mode} -> {run_dir}")
    if graph is not None:
        print(f"  그래프: {graph.retained_edges} edges, threshold={graph.threshold}, "
              f"spectral radius={spectral_radius(graph.a_tilde):.6f}")

    rows: list[dict] = []
    joint_step = 0
    truncated_total = 0
    for stage, n_epochs in ((1, cfg.stage1_epochs), (2, cfg.stage2_epochs)):
        if n_epochs == 0:
            continue
        joint = stage == 2
        opt = _optimizer(cfg, model, include_decoder=joint)
        scheduler = PlateauScheduler(opt, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr) if joint else None
        bar = tqdm(range(1, n_epochs + 1), desc=f"stage {stage}", leave=False)
        for epoch in bar:
            model.train()
            rng = Rng(cfg.seed).derive(stage * 100_000 + epoch).numpy_generator()
            sums = {"loss": 0.0, "ce": 0.0, "aux": 0.0, "nll": 0.0}
            n_batches = 0
            for idx in batches(len(train_set), cfg.batch_size, rng):
                batch, cut = make_batch(train_set, idx, cfg, vocab if joint else None)
                truncated_total += cut
                out = model.classify(batch.raw)
                l_ce = main_loss(cfg.main_loss, out.logits, batch.states, class_weights)
                l_aux = aux_loss(cfg.aux_loss, out.p, batch.binary, batch.states, tasl)
                if joint:
                    fused = model.fuse(out, curriculum_cap(joint_step, cfg.curriculum_steps, cfg.gate_cap_start))
                    dec_logits = model.decoder(batch.tokens[:, :-1], fused.v_fused)
                    l_nll = nll_loss(dec_logits, batch.tokens[:, 1:], cfg.mask_mode, cfg.n_nodes).loss
                    loss = total_objective(l_ce, l_aux, l_nll, cfg.lambda_cls, cfg.lambda_lm)
                else:
                    l_nll = torch.zeros((), dtype=torch.float64)
                    loss = cfg.lambda_cls * (l_ce + l_aux)
                check_finite(loss, f"stage {stage} epoch {epoch} loss")
                opt.zero_grad()
                loss.backward()
                opt.step()
                if joint:
                    joint_step += 1
                for key, value in (("loss", loss), ("ce", l_ce), ("aux", l_aux), ("nll", l_nll)):
                    sums[key] += float(value)
                n_batches += 1

            f1 = val_micro_f1(model, val_set, cfg)
            if scheduler is not None:
                scheduler.step(f1)
            lrs = opt.current_lrs()
            row = {"epoch": epoch, "stage": stage, **{k: v / max(n_batches, 1) for k, v in sums.items()}, "val_micro_f1": f1}
            row.update({f"lr_{g}": lrs.get(g, 0.0) if joint or g != "decoder" else 0.0 for g in LR_GROUPS})
            rows.append(row)
            tqdm.write(_epoch_line(row, n_epochs))
        bar.close()

    if truncated_total:
        print(f"[경고] max_len={cfg.max_len} 때문에 잘린 판독문: {truncated_total}건")
    log = pd.DataFrame(rows, columns=list(LOG_FIELDS))
    log.to_csv(run_dir / "train_log.csv", index=False)
    model.save(run_dir / CKPT_NAME)
    print(f"체크포인트 저장: {run_dir / CKPT_NAME}")
    return TrainResult(model, vocab, graph, log, run_dir)


def load_trained(cfg: RunConfig, run_dir: str | Path) -> tuple[GdmrgModel, Vocab]:
    run_dir = Path(run_dir)
    ckpt = run_dir / CKPT_NAME
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt} (run `gdmrg train` first)")
    vocab = Vocab.load(run_dir / VOCAB_NAME)
    seed_everything(cfg.seed)
    model = GdmrgModel(cfg, None, len(vocab)).load(ckpt)
    model.eval()
    return model, vocab


# ---------------- evaluation ----------------

@dataclass
class EvalResult:
    report: MetricsReport
    tau: np.ndarray
    generated: list[list[int]]
    out_dir: Path


def _attention_frame(attn: torch.Tensor, ids: np.ndarray) -> pd.DataFrame:
    per_key = attn.mean(dim=2).numpy()  # B x h x N, averaged over queries
    b, h, n = per_key.shape
    return pd.DataFrame({
        "sample_id": np.repeat(ids[:b], h * n),
        "head": np.tile(np.repeat(np.arange(h), n), b),
        "patch": np.tile(np.arange(n), b * h),
        "weight": per_key.reshape(-1),
    })


@torch.no_grad()
def evaluate(
    cfg: RunConfig,
    run_dir: str | Path | None = None,
    out_dir: str | Path | None = None,
    splits: dict[str, Dataset] | None = None,
    trained: tuple[GdmrgModel, Vocab] | None = None,
) -> EvalResult:
    """OTS on val, thresholds applied to test, beam-search reports, full metrics."""
    run_dir = Path(run_dir or cfg.out_dir)
    out_dir = Path(out_dir or run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = splits or load_splits(cfg, ("val", "test"))
    for name in ("val", "test"):
        if name not in splits:
            raise DataError(f"missing split '{name}'")
    model, vocab = trained or load_trained(cfg, run_dir)
    model.eval()
    names = disease_names(cfg.n_nodes)
    val_set, test_set = splits["val"], splits["test"]

    if cfg.use_ots:
        val_pred = predict(model, val_set, cfg)
        tau = ots(val_pred.probs, val_set.binary(cfg.unc_positive)[:, : cfg.n_nodes])
    else:
        tau = np.full(cfg.n_nodes, 0.5)
    write_thresholds(tau, names, out_dir / "tau.txt")

    test_pred = predict(model, test_set, cfg)
    decisions = (test_pred.probs >= tau[None, :]).astype(np.int64)
    truth = test_set.binary(cfg.unc_positive)[:, : cfg.n_nodes]

    generated: list[list[int]] = []
    attention = None
    for idx in tqdm(list(batches(len(test_set), cfg.batch_size)), desc="decode", leave=False):
        out = model.classify(torch.as_tensor(test_set.features[idx], dtype=torch.float64))
        fused = model.fuse(out)
        if attention is None and fused.attn is not None:
            attention = _attention_frame(fused.attn, test_set.ids[idx])
        for row, i in enumerate(idx):
            generated.append(generate(model.decoder, fused.v_fused[row], test_pred.prompts[i], cfg.beam_width, cfg.max_len))

    lines = [vocab.render(seq, cfg.show_prompt) for seq in generated]
    (out_dir / "generated_reports.txt").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    words = [vocab.render(seq).split() for seq in generated]

    report = build_report(decisions, truth, test_pred.probs, words, test_set.reports)
    write_metrics_csv(report, out_dir / "metrics.csv")
    roc_table(test_pred.probs, truth).to_csv(out_dir / "roc_curves.csv", index=False)
    if cfg.dump_attention:
        if attention is None:
            print("[경고] --dump-attention: DGSA 가 꺼져 있어 attention 이 없습니다.")
        else:
            attention.to_csv(out_dir / "attention_first_batch.csv", index=False)

    print("=" * 60)
    print(f"평가 결과 (test n={len(test_set)}, ots={'on' if cfg.use_ots else 'off'})")
    print(pd.Series(report.summary(), name="value").to_frame().to_markdown(floatfmt=".4f"))
    print("=" * 60)
    return EvalResult(report, tau, generated, out_dir)


# ---------------- experiments ----------------

def train_and_evaluate(cfg: RunConfig, splits: dict[str, Dataset], run_dir: Path) -> EvalResult:
    result = train(cfg, splits, run_dir)
    return evaluate(cfg, run_dir, splits=splits, trained=(result.model, result.vocab))


def sweep_phi(cfg: RunConfig, phis: Sequence[float], splits: dict[str, Dataset] | None = None) -> pd.DataFrame:
    unique = list(dict.fromkeys(float(p) for p in phis))
    splits = splits or load_splits(cfg)
    rows = []
    for phi in unique:
        run_cfg = cfg.replace(phi=phi, graph_mode="tki")
        res = train_and_evaluate(run_cfg, splits, Path(cfg.out_dir) / f"phi_{phi:g}")
        s = res.report.summary()
        rows.append({"phi": phi, "precision": s["precision"], "recall": s["recall"], "f1": s["f1"], "bleu_1": s.get("bleu_1", np.nan)})
    table = pd.DataFrame(rows, columns=["phi", "precision", "recall", "f1", "bleu_1"])
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    table.to_csv(Path(cfg.out_dir) / "sweep_phi.csv", index=False)
    print(table.to_markdown(index=False, floatfmt=".4f"))
    return table


ABLATION_AXES = ("components", "losses", "prompt_mask", "topology")


def ablation_variants(axis: str) -> list[tuple[str, dict]]:
    if axis == "components":
        base = {"use_dse": False, "graph_mode": "none", "use_dgsa": False}
        arch = [
            ("BASE", {}),
            ("BASE + DSE + DGSA", {"use_dse": True, "use_dgsa": True}),
            ("BASE + DSE + TKI", {"use_dse": True, "graph_mode": "tki"}),
            ("BASE + DSE + TKI + DGSA", {"use_dse": True, "graph_mode": "tki", "use_dgsa": True}),
        ]
        out = []
        for name, extra in arch:
            out.append((name, {**base, **extra, "use_ots": False}))
            out.append((name.replace("BASE", "BASE + OTS", 1), {**base, **extra, "use_ots": True}))
        return out
    if axis == "losses":
        return [
            (f"{main.upper()} / {aux.upper()}", {"main_loss": main, "aux_loss": aux})
            for main, aux in (("ce", "none"), ("ce", "mbce"), ("wfl", "mbce"), ("ce", "asl"), ("ce", "tasl"))
        ]
    if axis == "prompt_mask":
        return [("full sequence", {"mask_mode": "full"}), ("prompt masking", {"mask_mode": "prompt_masked"})]
    if axis == "topology":
        labels = {"none": "Base (w/o Graph)", "vanilla": "Vanilla GCN", "tki": "TKI"}
        return [
            (f"{n}-Node {'+ ' if mode != 'none' else ''}{labels[mode]}", {"n_nodes": n, "graph_mode": mode})
            for n in (14, 18)
            for mode in ("none", "vanilla", "tki")
        ]
    raise ValueError(f"unknown ablation axis '{axis}' (choose from {', '.join(ABLATION_AXES)})")


def _training_key(cfg: RunConfig) -> str:
    values = {k: v for k, v in dataclasses.asdict(cfg).items() if k not in EVAL_ONLY_KEYS}
    return json.dumps(values, sort_keys=True)


def ablate(cfg: RunConfig, axis: str, splits: dict[str, Dataset] | None = None) -> pd.DataFrame:
    variants = ablation_variants(axis)
    splits = splits or load_splits(cfg)
    root = Path(cfg.out_dir) / f"ablate_{axis}"
    trained: dict[str, tuple[Path, GdmrgModel, Vocab]] = {}
    rows = []
    for i, (name, overrides) in enumerate(variants):
        run_cfg = cfg.replace(**overrides)
        key = _training_key(run_cfg)
        variant_dir = root / f"{i:02d}"
        if key in trained:
            print(f"[CACHE] '{name}': 같은 학습 설정 재사용 ({trained[key][0]})")
        else:
            result = train(run_cfg, splits, variant_dir)
            trained[key] = (variant_dir, result.model, result.vocab)
        train_dir, model, vocab = trained[key]
        res = evaluate(run_cfg, train_dir, variant_dir, splits=splits, trained=(model, vocab))
        rows.append({"variant": name, **res.report.summary()})
    table = pd.DataFrame(rows)
    root.mkdir(parents=True, exist_ok=True)
    table.to_csv(root / "ablation.csv", index=False)
    print(table.to_markdown(index=False, floatfmt=".4f"))
    return table


SIM_SLICES = ("pos", "neg", "bla", "unc", "all")


def viz_topology(cfg: RunConfig, run_dir: str | Path | None = None, sim_slice: str = "pos") -> dict[str, Path]:
    """Dump M, M', A, Ã from the train split and, when a checkpoint exists, the W similarity map."""
    if sim_slice not in SIM_SLICES:
        raise ValueError(f"unknown similarity slice '{sim_slice}' (choose from {', '.join(SIM_SLICES)})")
    out_dir = Path(run_dir or cfg.out_dir) / "topology"
    train_set = load_splits(cfg, ("train",))["train"]
    names = disease_names(cfg.n_nodes)
    counts = count_cooccurrence(train_set.binary(cfg.unc_positive)[:, : cfg.n_nodes])
    m_prime = geometric_normalize(counts)
    graph = build_adjacency(m_prime, cfg.phi)
    paths = dump_matrices(
        {"cooccurrence": counts.m, "geometric": m_prime, "thresholded": graph.a_thresh, "normalized": graph.a_tilde},
        out_dir,
    )
    written = {p.stem: p for p in paths}
    print(f"phi={cfg.phi}: threshold={graph.threshold} edges={graph.retained_edges} "
          f"spectral radius={spectral_radius(graph.a_tilde):.6f}")

    ckpt = Path(run_dir or cfg.out_dir) / CKPT_NAME
    if not ckpt.exists():
        print(f"[경고] 체크포인트 없음 ({ckpt}); W 유사도 맵은 건너뜁니다.")
        return written

    model, _ = load_trained(cfg, ckpt.parent)
    with torch.no_grad():
        w = model.tki()
    states = list(ClinicalState) if sim_slice == "all" else [ClinicalState[sim_slice.upper()]]
    gen = cfg.gen_config()
    for state in states:
        stem = f"w_similarity_{state.name.lower()}"
        sim = mean_centered_cosine(w, state)
        written.update({p.stem: p for p in dump_matrices({stem: sim}, out_dir)})
        written[f"{stem}_pgm"] = pgm_from_similarity(sim, out_dir / f"{stem}.pgm")
        for label, (a, b) in (("comorbid", gen.comorbid_pair), ("exclusive", gen.exclusive_pair)):
            if a in names and b in names:
                print(f"  {state.token} {label} {a} / {b}: S = {pair_similarity(sim, names, a, b):+.4f}")
    return written


# ---------------- gradient suite ----------------

GRAD_PATHS = ("encoder", "dse", "tki", "main_head", "aux_head", "dgsa", "gate", "decoder")


def gradcheck(cfg: RunConfig, seeds: int = 20, batch_size: int = 2, max_entries: int = 3, tol: float = 1e-4) -> pd.DataFrame:
    """
    Finite differences of the full objective against autograd, per module.
    Dropout is off and the gate cap is 1 so the objective is smooth almost everywhere.
    """
    cfg = cfg.replace(dropout=0.0, gcn_dropout=0.0, use_dgsa=True, graph_mode=cfg.graph_mode if cfg.graph_mode != "none" else "tki")
    rows = []
    for seed in tqdm(range(seeds), desc="gradcheck", leave=False):
        seed_everything(seed)
        gen = Rng(seed).derive(0x6C).numpy_generator()
        y = (gen.random((64, cfg.n_nodes)) < 0.3).astype(np.int64)
        graph = build_adjacency(geometric_normalize(count_cooccurrence(y)), cfg.phi)
        vocab_size = 12
        model = GdmrgModel(cfg, graph.a_tilde, vocab_size)
        model.eval()
        raw = torch.as_tensor(gen.normal(size=(batch_size, cfg.n_patches, cfg.feat_dim)))
        states = torch.as_tensor(gen.integers(0, 4, size=(batch_size, cfg.n_nodes)))
        binary = (states == 0).to(torch.float64)
        t = min(cfg.max_len, cfg.n_nodes + 6)
        tokens = torch.as_tensor(gen.integers(1, vocab_size, size=(batch_size, t)))
        tasl = cfg.tasl()

        def objective() -> torch.Tensor:
            out = model.classify(raw)
            fused = model.fuse(out)
            dec = model.decoder(tokens[:, :-1], fused.v_fused)
            return total_objective(
                main_loss(cfg.main_loss, out.logits, states),
                aux_loss(cfg.aux_loss, out.p, binary, states, tasl),
                nll_loss(dec, tokens[:, 1:], cfg.mask_mode, cfg.n_nodes).loss,
                cfg.lambda_cls,
                cfg.lambda_lm,
            )

        for path in GRAD_PATHS:
            params = [p for name, p in model.named_parameters() if name.startswith(path + ".") and p.requires_grad]
            err = finite_diff_check(objective, params, eps=1e-6, max_entries=max_entries, seed=seed)
            rows.append({"seed": seed, "path": path, "max_rel_err": err, "passed": err < tol})
    table = pd.DataFrame(rows, columns=["seed", "path", "max_rel_err", "passed"])
    worst = table.groupby("path")["max_rel_err"].max().reindex(GRAD_PATHS)
    print(worst.to_frame().to_markdown(floatfmt=".2e"))
    return table
