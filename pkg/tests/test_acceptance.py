"""Acceptance suite.

One test per criterion; each prints a `criterion=N status=...` line.
Criteria 4, 5, 6, 7 and 8 share two end-to-end pipeline runs driven
through the installed command line (subprocess), exactly as a user
would run them.
"""

import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from vmfseg import fileio
from vmfseg.align import align, prototypes
from vmfseg.core import IGNORE_LABEL, LabelMap, Segmentation, TrainConfig, normalize_map
from vmfseg.kmeans import augment, e_step, init_grid, m_step
from vmfseg.loss import LossBatch, vmf_loss, vmfn_loss
from vmfseg.metrics import boundary_f, miou
from vmfseg.retrieval import PrototypeStore, finch, infer, knn
from vmfseg.train import ToyEmbedder, init_embedder, make_dataset

SUP_SPEC = "classes=4,images=20,size=64,seed=7"
NUM_CLASSES = 4
HOLDOUT = dict(num_images=10, classes=4, size=64, seed=7, start_index=20)


def report(criterion: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    print(f"criterion={criterion} status={status} {detail}")


def run_cli(args, cwd) -> str:
    proc = subprocess.run(
        [sys.executable, "-m", "vmfseg", *args],
        cwd=cwd,
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, f"vmfseg {' '.join(args)} failed:\n{proc.stderr}"
    return proc.stdout


def parse_miou(eval_output: str) -> float:
    for line in eval_output.splitlines():
        if line.startswith("images="):
            for field in line.split():
                if field.startswith("miou="):
                    return float(field.split("=", 1)[1])
    raise AssertionError(f"no miou summary in:\n{eval_output}")


def write_holdout(root: Path):
    scenes = make_dataset(**HOLDOUT)
    (root / "imgs").mkdir()
    (root / "gt").mkdir()
    for i, sc in enumerate(scenes):
        fileio.write_emb(root / "imgs" / f"h{i:02d}.sgem", sc.image, raw_features=True)
        fileio.write_map(root / "gt" / f"h{i:02d}.sglb", sc.gt.labels)


def run_supervised_pipeline(root: Path) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    run_cli(
        [
            "train", "--synthetic", SUP_SPEC, "--supervised", "--serial",
            "--out-checkpoint", "model.sgck", "--out-store", "store.sgps",
        ],
        cwd=root,
    )
    write_holdout(root)
    images = sorted(str(p) for p in (root / "imgs").glob("*.sgem"))
    run_cli(
        ["infer", *images, "--checkpoint", "model.sgck", "--store", "store.sgps",
         "--out-dir", "pred", "--serial"],
        cwd=root,
    )
    out = run_cli(["eval", "pred", "gt", "--num-classes", str(NUM_CLASSES)], cwd=root)
    return {"root": root, "miou": parse_miou(out), "elapsed": time.time() - t0}


def run_unsupervised_pipeline(root: Path) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    train_scenes = make_dataset(20, 4, 64, seed=7)
    overseg_dir = root / "overseg"
    overseg_dir.mkdir()
    for i, sc in enumerate(train_scenes):
        tiles = align(init_grid(64, 64, 25), sc.gt).seg
        fileio.write_map(overseg_dir / f"{i:03d}.sglb", tiles.labels)
    t0 = time.time()
    run_cli(
        [
            "train", "--synthetic", SUP_SPEC, "--unsupervised", "--serial",
            "--overseg", "overseg",
            "--out-checkpoint", "model.sgck", "--out-store", "store.sgps",
        ],
        cwd=root,
    )
    write_holdout(root)
    images = sorted(str(p) for p in (root / "imgs").glob("*.sgem"))
    run_cli(
        ["infer", *images, "--checkpoint", "model.sgck", "--store", "store.sgps",
         "--out-dir", "pred", "--serial"],
        cwd=root,
    )
    out = run_cli(["eval", "pred", "gt", "--num-classes", str(NUM_CLASSES)], cwd=root)
    return {"root": root, "miou": parse_miou(out), "elapsed": time.time() - t0}


@pytest.fixture(scope="module")
def sup_run(tmp_path_factory):
    return run_supervised_pipeline(tmp_path_factory.mktemp("sup"))


@pytest.fixture(scope="module")
def unsup_run(tmp_path_factory):
    return run_unsupervised_pipeline(tmp_path_factory.mktemp("unsup"))


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def fd_loss_grad(loss_fn, batch, h=1e-5):
    grad = np.zeros_like(batch.vectors)
    for i in range(batch.num_pixels):
        for j in range(batch.vectors.shape[1]):
            vals = []
            for sign in (1.0, -1.0):
                v = np.array(batch.vectors)
                v[i, j] += sign * h
                v[i] /= np.linalg.norm(v[i])
                nb = LossBatch(
                    vectors=v, own=batch.own, positives=batch.positives,
                    prototypes=batch.prototypes, kappa=batch.kappa,
                )
                vals.append(loss_fn(nb).loss)
            grad[i, j] = (vals[0] - vals[1]) / (2 * h)
    return grad


def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(1001)
    t0 = time.time()
    cases = 0
    worst = 0.0

    for loss_fn in (vmf_loss, vmfn_loss):
        for d in (3, 8):
            for kappa in (1.0, 10.0):
                for _ in range(10):
                    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 7))
                    protos = unit_rows(rng, k, d)
                    own = rng.integers(0, k, size=n)
                    positives = []
                    for i in range(n):
                        pool = np.setdiff1d(np.arange(k), [own[i]])
                        take = int(rng.integers(0, pool.size + 1))
                        positives.append(rng.choice(pool, size=take, replace=False))
                    batch = LossBatch(
                        vectors=unit_rows(rng, n, d),
                        own=own,
                        positives=tuple(positives),
                        prototypes=protos,
                        kappa=kappa,
                    )
                    analytic = loss_fn(batch).grad
                    numeric = fd_loss_grad(loss_fn, batch)
                    # Identically-zero losses leave only rounding noise on
                    # both sides; the floor keeps the ratio meaningful.
                    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-6)
                    rel = float(np.abs(analytic - numeric).max()) / scale
                    worst = max(worst, rel)
                    assert rel < 1e-4, (loss_fn.__name__, d, kappa, rel)
                    cases += 1

    # Through the embedder: d(loss)/d(parameters) by the chain rule.
    for hidden in (0, 4):
        for kappa in (1.0, 10.0):
            for trial in range(6):
                cfg = TrainConfig(embedding_dim=3, hidden_dim=hidden, seed=trial)
                model = init_embedder(cfg, feature_dim=4)
                x = rng.normal(size=(3, 4))
                protos = unit_rows(rng, 4, 3)
                own = rng.integers(0, 4, size=3)
                empties = tuple(np.empty(0, dtype=np.int64) for _ in range(3))

                def loss_of(m):
                    v, _ = m.forward(x)
                    return vmf_loss(
                        LossBatch(vectors=v, own=own, positives=empties,
                                  prototypes=protos, kappa=kappa)
                    ).loss

                v, cache = model.forward(x)
                out = vmf_loss(
                    LossBatch(vectors=v, own=own, positives=empties,
                              prototypes=protos, kappa=kappa)
                )
                grads = model.backward(cache, out.grad)
                h = 1e-5
                names = ("w1", "b1") if hidden == 0 else ("w1", "b1", "w2", "b2")
                params = {f: getattr(model, f) for f in ("w1", "b1", "w2", "b2")}
                for name in names:
                    param = params[name]
                    fd = np.zeros_like(param)
                    it = np.nditer(param, flags=["multi_index"])
                    while not it.finished:
                        idx = it.multi_index
                        for sign in (1.0, -1.0):
                            bumped = np.array(param)
                            bumped[idx] += sign * h
                            fd[idx] += sign * loss_of(ToyEmbedder(**{**params, name: bumped}))
                        fd[idx] /= 2 * h
                        it.iternext()
                    scale = max(float(np.abs(fd).max()), 1e-10)
                    rel = float(np.abs(grads[name] - fd).max()) / scale
                    worst = max(worst, rel)
                    assert rel < 1e-4, (hidden, kappa, name, rel)
                cases += 1

    elapsed = time.time() - t0
    passed = cases >= 100 and elapsed < 10.0
    report(1, passed, f"cases={cases} worst_rel_err={worst:.2e} elapsed={elapsed:.1f}s")
    assert passed


def test_criterion_2_kmeans_monotone_and_fixed_point():
    rng = np.random.default_rng(1002)
    t0 = time.time()
    maps = 0
    for _ in range(50):
        h = int(rng.integers(6, 65))
        w = int(rng.integers(6, 65))
        d = int(rng.integers(3, 9))
        k = int(rng.integers(2, min(26, h * w)))
        emb = normalize_map(rng.normal(size=(h, w, d)))
        aug = augment(emb, 1.0)
        seg = init_grid(h, w, k)
        vectors = np.ascontiguousarray(aug.flat())

        prev_labels = None
        prev_objective = -np.inf
        for round_idx in range(500):
            protos = m_step(aug, seg)
            from vmfseg import backend

            idx, sims = backend.assign(vectors, protos)
            seg = Segmentation.from_labels(idx.reshape(h, w))
            objective = float(sims.sum())
            assert objective >= prev_objective - 1e-9, (h, w, k, round_idx)
            prev_objective = objective
            if prev_labels is not None and np.array_equal(prev_labels, seg.labels):
                break
            prev_labels = seg.labels
        else:
            pytest.fail(f"no fixed point within 500 rounds for {h}x{w}, k={k}")
        maps += 1
    elapsed = time.time() - t0
    passed = maps >= 50 and elapsed < 30.0
    report(2, passed, f"maps={maps} elapsed={elapsed:.1f}s")
    assert passed


def _oracle_boundary_pixels(labels, class_id):
    h, w = len(labels), len(labels[0])
    out = []
    for r in range(h):
        for c in range(w):
            if labels[r][c] != class_id:
                continue
            if r == 0 or r == h - 1 or c == 0 or c == w - 1:
                out.append((r, c))
                continue
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                if labels[r + dr][c + dc] != class_id:
                    out.append((r, c))
                    break
    return out


def _oracle_max_matching(pred_pixels, gt_pixels, tol):
    adjacency = []
    for pr, pc in pred_pixels:
        adjacency.append(
            [j for j, (gr, gc) in enumerate(gt_pixels)
             if (pr - gr) ** 2 + (pc - gc) ** 2 <= tol * tol]
        )
    owner = {}

    def try_assign(i, seen):
        for j in adjacency[i]:
            if j in seen:
                continue
            seen.add(j)
            if j not in owner or try_assign(owner[j], seen):
                owner[j] = i
                return True
        return False

    matched = 0
    for i in range(len(adjacency)):
        if try_assign(i, set()):
            matched += 1
    return matched


def test_criterion_3_oracle_equivalence():
    rng = np.random.default_rng(1003)

    # e_step against exhaustive per-pixel max over <= 3 prototypes.
    for _ in range(25):
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        k = int(rng.integers(1, 4))
        emb = normalize_map(rng.normal(size=(h, w, 4)))
        aug = augment(emb, float(rng.uniform(0, 2)))
        protos = unit_rows(rng, k, 6)
        seg = e_step(aug, protos)
        flat = aug.flat()
        expected = []
        for i in range(h * w):
            best_j, best_s = 0, -np.inf
            for j in range(k):
                s = sum(float(flat[i][c]) * float(protos[j][c]) for c in range(6))
                if s > best_s:
                    best_j, best_s = j, s
            expected.append(best_j)
        compact = {old: new for new, old in enumerate(sorted(set(expected)))}
        expected = [compact[e] for e in expected]
        assert seg.flat().tolist() == expected

    # knn against a full brute-force sort.
    from vmfseg.core import Prototype

    vecs = unit_rows(rng, 200, 5)
    store = PrototypeStore.from_prototypes(
        [Prototype(vector=v, image_id=i, segment_id=0, semantic_label=0)
         for i, v in enumerate(vecs)]
    )
    for _ in range(20):
        q = unit_rows(rng, 1, 5)[0]
        k = int(rng.integers(1, 40))
        got = [(p.image_id, s) for p, s in knn(store, q, k)]
        sims = [float(np.dot(v, q)) for v in vecs]
        want = sorted(range(200), key=lambda i: (-sims[i], i))[:k]
        assert [g[0] for g in got] == want
        for (_, s), i in zip(got, want):
            assert abs(s - sims[i]) <= 1e-12

    # miou against hand-counted confusion.
    for _ in range(25):
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        classes = int(rng.integers(2, 5))
        gt_arr = rng.integers(0, classes, size=(h, w))
        pred_arr = rng.integers(0, classes, size=(h, w))
        if rng.integers(2):
            gt_arr[rng.integers(0, h), rng.integers(0, w)] = IGNORE_LABEL
        per_class, score = miou(LabelMap(labels=pred_arr), LabelMap(labels=gt_arr), classes)
        ious = []
        for cls in range(classes):
            tp = fp = fn = 0
            for r in range(h):
                for c in range(w):
                    if gt_arr[r, c] == IGNORE_LABEL:
                        continue
                    if gt_arr[r, c] == cls and pred_arr[r, c] == cls:
                        tp += 1
                    elif gt_arr[r, c] != cls and pred_arr[r, c] == cls:
                        fp += 1
                    elif gt_arr[r, c] == cls and pred_arr[r, c] != cls:
                        fn += 1
            if tp + fp + fn == 0:
                assert np.isnan(per_class[cls])
            else:
                ious.append(tp / (tp + fp + fn))
                assert abs(per_class[cls] - ious[-1]) <= 1e-12
        if ious:
            assert abs(score - float(np.mean(ious))) <= 1e-12

    # boundary_f against an independent boundary + matching oracle.
    for _ in range(20):
        h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        classes = int(rng.integers(2, 4))
        gt_arr = rng.integers(0, classes, size=(h, w))
        pred_arr = rng.integers(0, classes, size=(h, w))
        tol_frac = float(rng.uniform(0.05, 0.6))
        score = boundary_f(
            LabelMap(labels=pred_arr), LabelMap(labels=gt_arr), classes, tol_frac=tol_frac
        )
        tol = tol_frac * float(np.hypot(h, w))
        for cls in range(classes):
            pb = _oracle_boundary_pixels(gt_arr.tolist(), cls)  # gt side
            qb = _oracle_boundary_pixels(pred_arr.tolist(), cls)  # pred side
            if not pb and not qb:
                assert np.isnan(score.f_measure[cls])
                continue
            matched = _oracle_max_matching(qb, pb, tol)
            p = matched / len(qb) if qb else 0.0
            r = matched / len(pb) if pb else 0.0
            f = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
            assert abs(score.precision[cls] - p) <= 1e-12
            assert abs(score.recall[cls] - r) <= 1e-12
            assert abs(score.f_measure[cls] - f) <= 1e-12

    report(3, True, "e_step/knn/miou/boundary_f all match brute-force oracles")


def test_criterion_4_supervised_end_to_end(sup_run):
    passed = sup_run["miou"] >= 0.90 and sup_run["elapsed"] < 300.0
    report(
        4,
        passed,
        f"miou={sup_run['miou']:.4f} (target >= 0.90) elapsed={sup_run['elapsed']:.0f}s",
    )
    assert passed


def test_criterion_5_unsupervised_ratio(sup_run, unsup_run):
    ratio = unsup_run["miou"] / sup_run["miou"]
    passed = ratio >= 0.76
    report(
        5,
        passed,
        f"unsup_miou={unsup_run['miou']:.4f} sup_miou={sup_run['miou']:.4f} "
        f"ratio={ratio:.3f} (soft target >= 0.76)",
    )
    assert passed


def test_criterion_6_knn_robustness(sup_run):
    root = sup_run["root"]
    model = fileio.read_checkpoint(root / "model.sgck")
    store = PrototypeStore.from_prototypes(fileio.read_store(root / "store.sgps"))
    scenes = make_dataset(**HOLDOUT)
    cfg = TrainConfig(seed=7)
    scores = []
    for k in range(1, 33, 2):
        ck = replace(cfg, knn=k)
        vals = [miou(infer(model, sc.image, store, ck), sc.gt, NUM_CLASSES)[1] for sc in scenes]
        scores.append(float(np.mean(vals)))
    span = max(scores) - min(scores)
    passed = span <= 0.02
    report(6, passed, f"miou_span={span:.4f} over knn 1..31 (limit 0.02)")
    assert passed


def test_criterion_7_finch_contract(sup_run):
    protos = fileio.read_store(sup_run["root"] / "store.sgps")
    vectors = np.stack([p.vector for p in protos])
    hierarchy = finch(vectors)
    counts = hierarchy.counts
    ok = counts[-1] == 1 and all(b < a for a, b in zip(counts, counts[1:]))
    for fine, coarse in zip(hierarchy.levels, hierarchy.levels[1:]):
        for c in np.unique(fine):
            ok = ok and np.unique(coarse[fine == c]).size == 1
    report(7, ok, f"store={len(protos)} counts={','.join(map(str, counts))}")
    assert ok


def test_criterion_8_determinism(sup_run, unsup_run, tmp_path_factory):
    sup_repeat = run_supervised_pipeline(tmp_path_factory.mktemp("sup_repeat"))
    unsup_repeat = run_unsupervised_pipeline(tmp_path_factory.mktemp("unsup_repeat"))
    identical = True
    for first, second in ((sup_run, sup_repeat), (unsup_run, unsup_repeat)):
        a, b = first["root"], second["root"]
        for rel in ("model.sgck", "store.sgps"):
            identical = identical and (a / rel).read_bytes() == (b / rel).read_bytes()
        preds_a = sorted((a / "pred").glob("*.sglb"))
        preds_b = sorted((b / "pred").glob("*.sglb"))
        identical = identical and len(preds_a) == len(preds_b)
        for pa, pb in zip(preds_a, preds_b):
            identical = identical and pa.read_bytes() == pb.read_bytes()
    report(8, identical, "checkpoints, stores and predictions byte-identical across reruns")
    assert identical
