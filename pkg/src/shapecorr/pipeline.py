"""Training orchestration: structural-loss pretraining on a collection,
supervised retraining on the predicted maps, per-pair test-time denoising,
and the corrupted-supervision demonstration."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .eval import corrupt_map, geodesic_distances, geodesic_error, map_smoothness
from .featnet import (AdamState, Architecture, FeatureNet, adam_init,
                      adam_step, backward, forward, init_random)
from .fmap import fmap_to_p2p, nn_map, solve_fmap
from .geometry import AugmentParams, Shape, augment, synth_collection
from .losses import (bijectivity_loss, chamfer_spectral_loss, fmap_backward,
                     lie_loss, nce_loss, orthogonality_loss)
from .maps import PointMap, identity_map
from .spectral import (SpectralBasis, cotan_laplacian, eigenbasis,
                       pointcloud_laplacian, project)

__all__ = [
    "Collection",
    "TrainConfig",
    "MapSet",
    "DenoiseResult",
    "build_collection",
    "synthetic_collection",
    "stage1_train",
    "stage1_predict",
    "stage2_train",
    "ncp_un",
    "test_time_denoise",
    "ncp_demo",
]


def _default_augment() -> AugmentParams:
    # random rotation is off by default: nets this small cannot become
    # rotation-robust within desk-scale iteration budgets
    return AugmentParams(rotate=False, scale_range=(0.9, 1.1), jitter_std=0.01)


@dataclass
class TrainConfig:
    """Hyperparameters for both training stages and test-time denoising.

    Defaults are desk-scale: basis size and iteration budgets tuned so the
    two-stage pipeline on a synthetic collection runs in minutes on one CPU
    core while still showing the stage-2 improvement.
    """

    lr: float = 0.001
    n_iters_stage1: int = 150
    n_iters_stage2: int = 1200
    n_iters_demo: int = 300
    k: int = 12
    lam: float = 0.001
    tau: float = 0.07
    stage2_loss: str = "lie"        # lie | nce
    map_mode: str = "fmap"          # stage-1 extraction; stage 2 always uses nn
    patience: int = 100
    max_denoise_iters: int = 3000
    width: int = 32
    n_blocks: int = 4
    out_dim: int = 32
    augment: AugmentParams = field(default_factory=_default_augment)
    use_augment: bool = True
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.n_iters_stage1, self.n_iters_stage2) < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.stage2_loss not in ("lie", "nce"):
            raise ValueError("stage2_loss must be 'lie' or 'nce'")
        if self.map_mode not in ("nn", "fmap"):
            raise ValueError("map_mode must be 'nn' or 'fmap'")

    def architecture(self) -> Architecture:
        return Architecture(in_dim=3, width=self.width,
                            out_dim=self.out_dim, n_blocks=self.n_blocks)


@dataclass
class Collection:
    """Shapes with cached bases, a train/test split, and declared pairs."""

    shapes: list
    bases: list
    train_idx: list
    test_idx: list
    train_pairs: list
    test_pairs: list

    def __post_init__(self):
        n = len(self.shapes)
        if len(self.bases) != n:
            raise ValueError("one basis per shape required")
        if set(self.train_idx) & set(self.test_idx):
            raise ValueError("train and test shape sets must be disjoint")
        for i, j in list(self.train_pairs) + list(self.test_pairs):
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"pair ({i}, {j}) out of range")


@dataclass
class MapSet:
    """One map per (pair, provenance)."""

    maps: dict = field(default_factory=dict)

    def add(self, i: int, j: int, provenance: str, pmap: PointMap) -> None:
        key = (i, j, provenance)
        if key in self.maps:
            raise ValueError(f"duplicate map for {key}")
        self.maps[key] = pmap

    def get(self, i: int, j: int, provenance: str) -> PointMap:
        return self.maps[(i, j, provenance)]

    def for_provenance(self, provenance: str) -> dict:
        return {(i, j): m for (i, j, p), m in self.maps.items()
                if p == provenance}


@dataclass
class DenoiseResult:
    """Denoised map plus the cycle-loss trace used for early stopping."""

    map: PointMap
    cycle_log: np.ndarray
    best_iteration: int

    @property
    def best_cycle_loss(self) -> float:
        return float(self.cycle_log[self.best_iteration])


def build_collection(shapes, cfg: TrainConfig, train_idx, test_idx,
                     train_pairs=None, test_pairs=None,
                     k_nn: int = 8, bandwidth: float | None = None) -> Collection:
    """Compute a basis per shape and assemble a Collection.

    Default pairing is all ordered-free pairs within the train set and within
    the test set respectively.
    """
    bases = []
    for s in shapes:
        lap = cotan_laplacian(s) if s.is_mesh else \
            pointcloud_laplacian(s, k_nn=k_nn, bandwidth=bandwidth)
        bases.append(eigenbasis(lap, cfg.k))
    if train_pairs is None:
        train_pairs = [(i, j) for a, i in enumerate(train_idx)
                       for j in list(train_idx)[a + 1:]]
    if test_pairs is None:
        test_pairs = [(i, j) for a, i in enumerate(test_idx)
                      for j in list(test_idx)[a + 1:]]
    return Collection(list(shapes), bases, list(train_idx), list(test_idx),
                      list(train_pairs), list(test_pairs))


def synthetic_collection(cfg: TrainConfig, kind: str = "bent_cylinder",
                         n_shapes: int = 6, n_target: int = 800,
                         magnitude: float = 0.3, seed: int | None = None,
                         n_train: int | None = None) -> Collection:
    """A Collection of deformed copies of one base mesh (identity GT throughout)."""
    seed = cfg.seed if seed is None else seed
    shapes = synth_collection(kind, n_shapes, n_target, magnitude, seed)
    n_train = n_shapes // 2 if n_train is None else n_train
    return build_collection(shapes, cfg, train_idx=list(range(n_train)),
                            test_idx=list(range(n_train, n_shapes)))


def _maybe_augment(shape: Shape, cfg: TrainConfig, rng: np.random.Generator) -> Shape:
    if not cfg.use_augment:
        return shape
    return augment(shape, cfg.augment, int(rng.integers(2 ** 63)))


def _pair_features(net, collection, i, j, cfg, rng):
    si = _maybe_augment(collection.shapes[i], cfg, rng)
    sj = _maybe_augment(collection.shapes[j], cfg, rng)
    F, cF = forward(net, si, collection.bases[i])
    G, cG = forward(net, sj, collection.bases[j])
    return si, sj, F, cF, G, cG


def stage1_train(collection: Collection, cfg: TrainConfig,
                 loss_log: list | None = None) -> FeatureNet:
    """Structural-loss training: bijectivity + orthogonality of the spectral
    maps solved from the network's features (plus the chamfer round-trip term
    on point clouds)."""
    if len(collection.train_idx) < 2 or not collection.train_pairs:
        raise ValueError("stage 1 needs at least 2 train shapes and 1 pair")
    net = init_random(cfg.architecture(), cfg.seed)
    state = adam_init(net, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    for it in range(cfg.n_iters_stage1):
        i, j = collection.train_pairs[rng.integers(len(collection.train_pairs))]
        si, sj, F, cF, G, cG = _pair_features(net, collection, i, j, cfg, rng)
        bi, bj = collection.bases[i], collection.bases[j]
        A_spec = project(bi, F)
        B_spec = project(bj, G)
        Cij, ctx_ij = solve_fmap(A_spec, B_spec, bi.evals, bj.evals, cfg.lam,
                                 want_ctx=True)
        Cji, ctx_ji = solve_fmap(B_spec, A_spec, bj.evals, bi.evals, cfg.lam,
                                 want_ctx=True)
        b1 = bijectivity_loss(Cij.C, Cji.C)
        b2 = bijectivity_loss(Cji.C, Cij.C)
        o1 = orthogonality_loss(Cij.C)
        o2 = orthogonality_loss(Cji.C)
        total = b1.value + b2.value + o1.value + o2.value
        dCij = b1.dC + b2.dC2 + o1.dC
        dCji = b1.dC2 + b2.dC + o2.dC
        if not (si.is_mesh and sj.is_mesh):
            ch1 = chamfer_spectral_loss(si.vertices, bi.Phi, bi.A, Cij.C, Cji.C)
            ch2 = chamfer_spectral_loss(sj.vertices, bj.Phi, bj.A, Cji.C, Cij.C)
            total += ch1.value + ch2.value
            dCij += ch1.dC + ch2.dC2
            dCji += ch1.dC2 + ch2.dC
        if not np.isfinite(total):
            raise RuntimeError(
                f"stage-1 loss diverged (non-finite) at iteration {it} on "
                f"pair ({i}, {j})")
        dA1, dB1 = fmap_backward(dCij, ctx_ij)
        dB2, dA2 = fmap_backward(dCji, ctx_ji)
        dF = bi.A[:, None] * (bi.Phi @ (dA1 + dA2))
        dG = bj.A[:, None] * (bj.Phi @ (dB1 + dB2))
        grads = backward(net, cF, dF) + backward(net, cG, dG)
        net, state = adam_step(net, grads, state)
        if loss_log is not None:
            loss_log.append(total)
    return net


def stage1_predict(net: FeatureNet, collection: Collection, cfg: TrainConfig,
                   pairs=None, provenance: str = "stage1") -> MapSet:
    """Maps for the given pairs (train pairs by default) from a trained net.

    Mode 'nn' matches features directly; mode 'fmap' solves the spectral map
    and converts it.  Either way the map for pair (i, j) runs i -> j.
    """
    pairs = collection.train_pairs if pairs is None else pairs
    out = MapSet()
    for i, j in pairs:
        F, _ = forward(net, collection.shapes[i], collection.bases[i])
        G, _ = forward(net, collection.shapes[j], collection.bases[j])
        bi, bj = collection.bases[i], collection.bases[j]
        ids = (collection.shapes[i].id, collection.shapes[j].id)
        if cfg.map_mode == "nn":
            pmap = nn_map(F, G, *ids)
        else:
            Cji = solve_fmap(project(bj, G), project(bi, F), bj.evals,
                             bi.evals, cfg.lam, from_id=ids[1], to_id=ids[0])
            pmap = fmap_to_p2p(Cji, bj.Phi, bi.Phi)
        out.add(i, j, provenance, pmap)
    return out


def _supervised_step(net, F, cF, G, cG, sj, sup: PointMap, cfg):
    """Loss + parameter gradients for one supervised pair iteration."""
    if cfg.stage2_loss == "lie":
        lv = lie_loss(F, G, sj.vertices, sup)
    else:
        pairs = np.stack([np.arange(sup.n_from), sup.indices], axis=1)
        lv = nce_loss(F, G, pairs, tau=cfg.tau)
    grads = backward(net, cF, lv.dF) + backward(net, cG, lv.dG)
    return lv.value, grads


def stage2_train(collection: Collection, maps: MapSet | dict,
                 cfg: TrainConfig, loss_log: list | None = None) -> FeatureNet:
    """Train a freshly initialized net to reproduce the supplied maps.

    maps must cover the train pairs (i -> j direction); this is the stage
    where fitting noisy supervision with a smoothness-biased network cleans
    the maps up rather than copying their artifacts.
    """
    if isinstance(maps, MapSet):
        sup_maps = {}
        for (i, j, _), m in maps.maps.items():
            if (i, j) in sup_maps:
                raise ValueError(f"ambiguous supervision for pair ({i}, {j}): "
                                 "multiple provenances")
            sup_maps[(i, j)] = m
    else:
        sup_maps = dict(maps)
    if not sup_maps:
        raise ValueError("empty supervision map set")
    for pair in collection.train_pairs:
        if tuple(pair) not in sup_maps:
            raise ValueError(f"no supervision map for train pair {pair}")
    net = init_random(cfg.architecture(), cfg.seed + 1)
    state = adam_init(net, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    for it in range(cfg.n_iters_stage2):
        i, j = collection.train_pairs[rng.integers(len(collection.train_pairs))]
        si, sj, F, cF, G, cG = _pair_features(net, collection, i, j, cfg, rng)
        value, grads = _supervised_step(net, F, cF, G, cG, sj,
                                        sup_maps[(i, j)], cfg)
        if not np.isfinite(value):
            raise RuntimeError(
                f"stage-2 loss diverged (non-finite) at iteration {it}")
        net, state = adam_step(net, grads, state)
        if loss_log is not None:
            loss_log.append(value)
    return net


def ncp_un(collection: Collection, cfg: TrainConfig, gt_maps: dict | None = None):
    """The full two-stage unsupervised pipeline.

    Stage 1 trains with structural losses and predicts maps on the train
    pairs; stage 2 retrains a fresh net supervised by those maps.  Test-pair
    correspondences come from nearest neighbors in the stage-2 feature space.
    Returns (stage-2 net, MapSet over test pairs for both stages, metric rows).

    gt_maps, when given, maps (i, j) pairs to ground-truth PointMaps and
    enables geodesic-error metrics; nothing else ever reads test-pair GT.
    """
    shared = set(map(tuple, collection.train_pairs)) & set(
        map(tuple, collection.test_pairs))
    if shared:
        warnings.warn(f"train and test pairs overlap ({sorted(shared)}); "
                      "evaluation is not held out")
    net1 = stage1_train(collection, cfg)
    maps1 = stage1_predict(net1, collection, cfg)
    net2 = stage2_train(collection, maps1, cfg)

    test_maps = MapSet()
    stage1_test = stage1_predict(net1, collection, cfg,
                                 pairs=collection.test_pairs)
    for (i, j), m in stage1_test.for_provenance("stage1").items():
        test_maps.add(i, j, "stage1", m)
    for i, j in collection.test_pairs:
        F, _ = forward(net2, collection.shapes[i], collection.bases[i])
        G, _ = forward(net2, collection.shapes[j], collection.bases[j])
        test_maps.add(i, j, "stage2", nn_map(
            F, G, collection.shapes[i].id, collection.shapes[j].id))

    metrics = []
    fields: dict[int, object] = {}
    for (i, j, provenance), pmap in sorted(test_maps.maps.items(),
                                           key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        row = {"pair": f"{i}-{j}", "provenance": provenance}
        shape_j = collection.shapes[j]
        if gt_maps is not None and (i, j) in gt_maps:
            if j not in fields and shape_j.is_mesh:
                fields[j] = geodesic_distances(shape_j)
            row["geodesic_error"] = geodesic_error(
                pmap, gt_maps[(i, j)], shape_j, field=fields.get(j))
        if collection.shapes[i].is_mesh:
            row["smoothness"] = map_smoothness(
                pmap, collection.shapes[i], shape_j)
        metrics.append(row)
    return net2, test_maps, metrics


def _nn_cycle_value(F: np.ndarray, G: np.ndarray, X_M: np.ndarray,
                    X_N: np.ndarray) -> float:
    """Symmetrized round-trip cycle loss of the hard nearest-neighbor maps.

    Equals cycle_loss evaluated on the one-hot matrices of the two NN maps,
    summed over both orderings: composing N -> M -> N and M -> N -> M and
    adding the squared coordinate displacements.  (The softmax-weighted
    variant saturates at the coordinate variance when feature distances are
    small, which makes it useless as a training monitor at this scale.)
    """
    t_mn = nn_map(F, G).indices
    t_nm = nn_map(G, F).indices
    cyc_n = float(((X_N - X_N[t_mn[t_nm]]) ** 2).sum())
    cyc_m = float(((X_M - X_M[t_nm[t_mn]]) ** 2).sum())
    return cyc_n + cyc_m


def test_time_denoise(shape_M: Shape, shape_N: Shape, basis_M: SpectralBasis,
                      basis_N: SpectralBasis, noisy: PointMap,
                      cfg: TrainConfig) -> DenoiseResult:
    """Single-pair map cleanup by retraining against the noisy map.

    A fresh net is fit with the contrastive loss on the noisy correspondences
    (no augmentation); the round-trip cycle loss of the induced hard maps is
    tracked every iteration and training stops once it has not improved for
    cfg.patience iterations (hard cap cfg.max_denoise_iters).  The map from
    the best-cycle-loss parameters is returned.
    """
    if noisy.n_from != shape_M.n_vertices or noisy.n_to != shape_N.n_vertices:
        raise ValueError("noisy map direction does not match the pair")
    if not noisy.is_hard:
        raise ValueError("test_time_denoise expects a hard input map")
    net = init_random(cfg.architecture(), cfg.seed)
    state = adam_init(net, lr=cfg.lr)
    pairs = np.stack([np.arange(noisy.n_from), noisy.indices], axis=1)
    rev_pairs = pairs[:, ::-1]
    cycle_log = []
    best_val = np.inf
    best_iter = -1
    best_params = net.params.copy()
    for it in range(cfg.max_denoise_iters):
        F, cF = forward(net, shape_M, basis_M)
        G, cG = forward(net, shape_N, basis_N)
        cyc = _nn_cycle_value(F, G, shape_M.vertices, shape_N.vertices)
        cycle_log.append(cyc)
        if cyc < best_val:
            best_val = cyc
            best_iter = it
            best_params = net.params.copy()
        elif it - best_iter >= cfg.patience:
            break
        # contrastive fit of the noisy correspondences, both directions so the
        # forward and reverse NN maps sharpen together
        fwd = nce_loss(F, G, pairs, tau=cfg.tau)
        rev = nce_loss(G, F, rev_pairs, tau=cfg.tau)
        if not (np.isfinite(fwd.value) and np.isfinite(rev.value)):
            raise RuntimeError(f"denoising loss diverged at iteration {it}")
        grads = backward(net, cF, fwd.dF + rev.dG) \
            + backward(net, cG, fwd.dG + rev.dF)
        net, state = adam_step(net, grads, state)
    best_net = FeatureNet(net.arch, best_params)
    F, _ = forward(best_net, shape_M, basis_M)
    G, _ = forward(best_net, shape_N, basis_N)
    denoised = nn_map(F, G, noisy.from_id, noisy.to_id)
    return DenoiseResult(map=denoised, cycle_log=np.array(cycle_log),
                         best_iteration=best_iter)


def ncp_demo(shape_M: Shape, shape_N: Shape, basis_M: SpectralBasis,
             basis_N: SpectralBasis, gt: PointMap, noise_levels,
             cfg: TrainConfig) -> dict:
    """Corrupted-supervision sweep: fit nets against maps corrupted at each
    level and log the loss and induced-map error along the way.

    Returns {level: {"input_error": float, "curve": [(iteration, loss,
    geodesic_error), ...]}}.  The induced map is the hard nearest-neighbor
    map from the current features, evaluated against the clean ground truth.
    """
    if gt.n_from != shape_M.n_vertices or gt.n_to != shape_N.n_vertices:
        raise ValueError("gt direction does not match the pair")
    fld = geodesic_distances(shape_N) if shape_N.is_mesh else None
    out = {}
    for level in noise_levels:
        sup = corrupt_map(gt, float(level), seed=cfg.seed + int(level * 1000))
        pairs = np.stack([np.arange(sup.n_from), sup.indices], axis=1)
        net = init_random(cfg.architecture(), cfg.seed)
        state = adam_init(net, lr=cfg.lr)
        curve = []
        for it in range(cfg.n_iters_demo + 1):
            F, cF = forward(net, shape_M, basis_M)
            G, cG = forward(net, shape_N, basis_N)
            lv = nce_loss(F, G, pairs, tau=cfg.tau)
            if it % cfg.log_every == 0 or it == cfg.n_iters_demo:
                induced = nn_map(F, G, gt.from_id, gt.to_id)
                err = geodesic_error(induced, gt, shape_N, field=fld)
                curve.append((it, lv.value, err))
            if it == cfg.n_iters_demo:
                break
            grads = backward(net, cF, lv.dF) + backward(net, cG, lv.dG)
            net, state = adam_step(net, grads, state)
        out[float(level)] = {
            "input_error": geodesic_error(sup, gt, shape_N, field=fld),
            "curve": curve,
        }
    return out
