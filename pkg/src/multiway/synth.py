"""Ground-truth generators: planted scenes, forward-model EEG/fMRI data,
spectral tensors and stable MAR systems.

Everything is a pure function of (spec, seed); generated data satisfy their
defining forward equations exactly before noise injection, and requested
SNRs are matched exactly by scaling the realized noise power.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps
from scipy import stats as spstats

from .tensor import KruskalModel, kruskal_reconstruct

__all__ = [
    "SceneSpec",
    "PlantedScene",
    "make_scene",
    "add_noise",
    "grid_coords",
    "lattice_adjacency",
    "gaussian_lead_field",
    "hrf_double_gamma",
    "simulate_eeg",
    "simulate_fmri",
    "spectral_tensor",
    "simulate_mar",
    "random_mar",
    "companion_radius",
    "make_coupled_pair",
    "random_kruskal",
    "make_gc_clusters",
]


def add_noise(x, snr_db, rng):
    """Add white Gaussian noise scaled so the realized SNR is exactly snr_db."""
    x = np.asarray(x, dtype=float)
    noise = rng.standard_normal(x.shape)
    sig = np.linalg.norm(x)
    nn = np.linalg.norm(noise)
    if sig == 0 or nn == 0:
        return x + noise
    return x + noise * (sig / nn) / 10.0 ** (snr_db / 20.0)


def grid_coords(grid):
    """Lattice coordinates of every node, C-order raveling, shape (n, ndim)."""
    grid = tuple(int(g) for g in grid)
    mesh = np.meshgrid(*[np.arange(g) for g in grid], indexing="ij")
    return np.column_stack([m.ravel() for m in mesh]).astype(float)


def lattice_adjacency(grid):
    """Nearest-neighbour adjacency of a regular lattice."""
    coords = grid_coords(grid)
    n = coords.shape[0]
    adj = np.zeros((n, n))
    d2 = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=2)
    adj[d2 == 1.0] = 1.0
    return adj


def gaussian_lead_field(grid, n_sensors, width=2.5):
    """Synthetic lead field: Gaussian spatial smearing rows with unit norm.

    Sensors sit on an even sublattice over the source grid; stands in for a
    head model in simulations.
    """
    coords = grid_coords(grid)
    grid = tuple(int(g) for g in grid)
    # spread sensors evenly over the grid box
    per_dim = max(1, int(round(n_sensors ** (1.0 / len(grid)))))
    axes = []
    counts = []
    for g in grid:
        axes.append(np.linspace(0, g - 1, per_dim))
        counts.append(per_dim)
    mesh = np.meshgrid(*axes, indexing="ij")
    sensors = np.column_stack([m.ravel() for m in mesh])
    if sensors.shape[0] < n_sensors:
        # fill remaining sensors along the longest axis
        extra = np.linspace(0, grid[0] - 1, n_sensors - sensors.shape[0] + 2)[1:-1]
        pad = np.zeros((extra.size, len(grid)))
        pad[:, 0] = extra
        for d in range(1, len(grid)):
            pad[:, d] = (grid[d] - 1) / 2.0
        sensors = np.vstack([sensors, pad])
    sensors = sensors[:n_sensors]
    d2 = np.sum((sensors[:, None, :] - coords[None, :, :]) ** 2, axis=2)
    k = np.exp(-0.5 * d2 / width**2)
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    return k


@dataclass
class SceneSpec:
    """Recipe for a planted scene of rank-one space/time/frequency atoms."""

    grid: tuple = (10, 10)
    n_sensors: int = 32
    n_times: int = 400
    n_atoms: int = 2
    snr_db: float = 20.0
    seed: int = 0
    fs: float = 100.0
    atom_width: float = 1.8
    freqs: tuple = ()
    spectral_kind: str = "peaked"
    envelope: str = "smooth"
    fmri_step: int = 5
    amplitudes: tuple = ()


@dataclass
class PlantedScene:
    spec: SceneSpec
    centers: np.ndarray            # atom centers in grid coordinates
    spatial_maps: np.ndarray       # I_Cx x R, nonnegative, unit columns
    envelopes: np.ndarray          # I_T x R, nonnegative
    signals: np.ndarray            # I_T x R, unit columns (envelope * carrier)
    freqs: np.ndarray              # carrier frequency per atom (Hz)
    amplitudes: np.ndarray         # per-atom scale


def _pick_centers(grid, n_atoms, width, rng):
    coords = grid_coords(grid)
    lo = np.array([0.2 * (g - 1) for g in grid])
    hi = np.array([0.8 * (g - 1) for g in grid])
    centers = []
    min_sep = max(3.0 * width, 2.0)
    for _ in range(2000):
        c = rng.uniform(lo, hi)
        if all(np.linalg.norm(c - o) >= min_sep for o in centers):
            centers.append(c)
        if len(centers) == n_atoms:
            break
    while len(centers) < n_atoms:  # crowded grid: relax separation
        centers.append(rng.uniform(lo, hi))
    return np.asarray(centers), coords


def make_scene(spec):
    """Deterministic planted scene for the given spec."""
    rng = np.random.default_rng(spec.seed)
    r = spec.n_atoms
    centers, coords = _pick_centers(spec.grid, r, spec.atom_width, rng) if r else (
        np.zeros((0, len(spec.grid))), grid_coords(spec.grid))
    maps = np.zeros((coords.shape[0], r))
    for j in range(r):
        d2 = np.sum((coords - centers[j]) ** 2, axis=1)
        blob = np.exp(-0.5 * d2 / spec.atom_width**2)
        blob[d2 > (3.0 * spec.atom_width) ** 2] = 0.0  # truncated Gaussian
        maps[:, j] = blob / np.linalg.norm(blob)
    t = np.arange(spec.n_times) / spec.fs
    freqs = np.asarray(spec.freqs if spec.freqs else
                       [spec.fs / 10.0 * (1.0 + 0.35 * j) for j in range(r)])
    env = np.zeros((spec.n_times, r))
    sig = np.zeros((spec.n_times, r))
    for j in range(r):
        if spec.envelope == "boxcar":
            start = int(rng.uniform(0.1, 0.4) * spec.n_times)
            stop = int(rng.uniform(0.6, 0.9) * spec.n_times)
            e = np.zeros(spec.n_times)
            e[start:stop] = 1.0
        else:
            center = rng.uniform(0.3, 0.7) * spec.n_times
            width = rng.uniform(0.15, 0.3) * spec.n_times
            e = np.exp(-0.5 * ((np.arange(spec.n_times) - center) / width) ** 2)
        env[:, j] = e
        phase = rng.uniform(0, 2 * np.pi)
        carrier = np.cos(2 * np.pi * freqs[j] * t + phase)
        s = e * carrier
        sig[:, j] = s / np.linalg.norm(s)
    amps = np.asarray(spec.amplitudes if spec.amplitudes else np.ones(r))
    return PlantedScene(spec=spec, centers=centers, spatial_maps=maps,
                        envelopes=env, signals=sig, freqs=freqs, amplitudes=amps)


def hrf_double_gamma(dt, duration=32.0, peak=6.0, undershoot=16.0, ratio=1.0 / 6.0):
    """Canonical double-gamma hemodynamic impulse response sampled at dt."""
    t = np.arange(0.0, duration, dt)
    g1 = spstats.gamma.pdf(t, a=peak + 1.0, scale=1.0)
    g2 = spstats.gamma.pdf(t, a=undershoot + 1.0, scale=1.0)
    h = g1 - ratio * g2
    return h / np.max(np.abs(h))


def simulate_eeg(scene, model):
    """V = K G + noise for the planted scene; returns (V, G)."""
    g = scene.spatial_maps @ (scene.amplitudes * scene.signals).T
    v = model.lead_field @ g
    rng = np.random.default_rng(scene.spec.seed + 1)
    return add_noise(v, scene.spec.snr_db, rng), g


def simulate_fmri(scene, model):
    """B = Gamma H + noise; the VFFS Gamma carries the atom envelopes."""
    gamma = scene.spatial_maps @ (scene.amplitudes * scene.envelopes).T
    b = gamma @ model.hemodynamic
    rng = np.random.default_rng(scene.spec.seed + 2)
    return add_noise(b, scene.spec.snr_db, rng), gamma


def spectral_tensor(v, *, window=64, hop=None, fs=1.0, method="gabor", n_tapers=4):
    """Short-time spectral magnitude of every channel, shaped channel x time x freq."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    n_ch, n_t = v.shape
    if window > n_t:
        raise ValueError(f"window {window} longer than the series ({n_t})")
    hop = hop or window // 2
    n_frames = 1 + (n_t - window) // hop
    n_freq = window // 2 + 1
    if method == "multitaper":
        tapers = sps.windows.dpss(window, NW=max(1.5, n_tapers / 2.0), Kmax=n_tapers)
    else:
        tapers = sps.windows.hann(window, sym=False)[None, :]
    out = np.zeros((n_ch, n_frames, n_freq))
    for f in range(n_frames):
        seg = v[:, f * hop: f * hop + window]
        spectra = np.abs(np.fft.rfft(seg[:, None, :] * tapers[None, :, :], axis=2))
        out[:, f, :] = spectra.mean(axis=1)
    return out


def companion_radius(a):
    """Spectral radius of the companion matrix of the stacked MAR faces."""
    a = np.asarray(a, dtype=float)
    n, _, p = a.shape
    comp = np.zeros((n * p, n * p))
    comp[:n, :] = np.concatenate([a[:, :, l] for l in range(p)], axis=1)
    if p > 1:
        comp[n:, :-n] = np.eye(n * (p - 1))
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def simulate_mar(a, noise_scale, n_times, seed, max_radius=0.95):
    """Series generated by the MAR recursion with Gaussian innovations.

    Rejects unstable coefficient tensors; a burn-in of 10 * lags samples is
    discarded.  Returns an I_Cx x n_times matrix.
    """
    a = np.asarray(a, dtype=float)
    n, _, p = a.shape
    radius = companion_radius(a)
    if radius >= max_radius:
        raise ValueError(f"unstable MAR coefficients: companion radius {radius:.3f}")
    rng = np.random.default_rng(seed)
    burn = 10 * p
    total = n_times + burn
    out = np.zeros((n, total))
    innov = noise_scale * rng.standard_normal((n, total))
    for t in range(total):
        acc = innov[:, t].copy()
        for l in range(1, p + 1):
            if t - l >= 0:
                acc += a[:, :, l - 1] @ out[:, t - l]
        out[:, t] = acc
    return out[:, burn:]


def random_mar(n_nodes, n_lags, seed, density=0.3, strength=0.9):
    """Random sparse stable MAR coefficient tensor (companion radius < 0.95)."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n_nodes, n_nodes, n_lags))
    mask = rng.random((n_nodes, n_nodes, n_lags)) < density
    a = a * mask
    for _ in range(200):
        radius = companion_radius(a)
        if radius < 0.95 * strength:
            break
        a *= 0.9 * strength / max(radius, 1e-12)
    return a


def random_kruskal(shape, rank, seed, kind="smooth", snr_db=None):
    """Ground-truth Kruskal model with well-separated smooth (or Gaussian)
    factor columns; optionally returns a noisy reconstruction too."""
    rng = np.random.default_rng(seed)
    factors = []
    for s in shape:
        if kind == "smooth":
            t = np.arange(s)
            centers = np.linspace(0.2 * s, 0.8 * s, rank) + rng.uniform(-0.04 * s, 0.04 * s, rank)
            width = max(s / (3.0 * rank + 2.0), 1.0)
            f = np.exp(-0.5 * ((t[:, None] - centers[None, :]) / width) ** 2)
        else:
            f = rng.standard_normal((s, rank))
        factors.append(f / np.linalg.norm(f, axis=0))
    model = KruskalModel(factors, rng.uniform(0.8, 1.2, rank)).normalize()
    if snr_db is None:
        return model
    clean = kruskal_reconstruct(model)
    noisy = add_noise(clean, snr_db, rng)
    return model, noisy


def make_coupled_pair(
    grid,
    *,
    n_atoms=3,
    n_shared=40,
    n_freq=24,
    n_sensors=16,
    snr_db=20.0,
    seed=0,
    coupled=True,
):
    """Tensor/matrix pair sharing (or not) the shared-mode signatures.

    Returns a dict with the spectral-style tensor `x` (sensors x shared x
    freq), the matrix `y` (sources x shared) and all generating signatures.
    """
    rng = np.random.default_rng(seed)
    spec = SceneSpec(grid=grid, n_atoms=n_atoms, seed=seed, atom_width=1.0)
    scene = make_scene(spec)
    m_y = scene.spatial_maps.copy()               # sources x R
    if n_atoms > 1:                               # make the blobs disjoint
        winner = np.argmax(m_y, axis=1)
        keep = np.zeros_like(m_y, dtype=bool)
        keep[np.arange(m_y.shape[0]), winner] = True
        m_y = np.where(keep & (m_y > 0), m_y, 0.0)
        norms = np.linalg.norm(m_y, axis=0)
        m_y /= np.where(norms > 0, norms, 1.0)
    # disjoint sensor groups and frequency bands keep the atoms orthogonal,
    # so greedy rank-one extraction can separate them cleanly
    m_x = np.zeros((n_sensors, n_atoms))
    group = n_sensors // n_atoms
    for j in range(n_atoms):
        sl = slice(j * group, (j + 1) * group if j < n_atoms - 1 else n_sensors)
        m_x[sl, j] = 0.5 + rng.random(sl.stop - sl.start)
    m_x /= np.linalg.norm(m_x, axis=0)
    f_x = np.zeros((n_freq, n_atoms))
    band = n_freq // n_atoms
    for j in range(n_atoms):
        sl = slice(j * band, (j + 1) * band if j < n_atoms - 1 else n_freq)
        prof = np.zeros(n_freq)
        center = (sl.start + sl.stop - 1) / 2.0
        prof[sl] = np.exp(-0.5 * ((np.arange(sl.start, sl.stop) - center) / 1.5) ** 2)
        f_x[:, j] = prof / np.linalg.norm(prof)
    # full-period cosines are exactly orthogonal on the shared grid
    t_shared = np.column_stack(
        [np.cos(2 * np.pi * (j + 1) * (np.arange(n_shared) + 0.5) / n_shared)
         for j in range(n_atoms)]
    )
    t_shared /= np.linalg.norm(t_shared, axis=0)
    if coupled:
        t_y = t_shared * rng.uniform(0.8, 1.2, n_atoms)
    else:
        t_y, _ = np.linalg.qr(rng.standard_normal((n_shared, n_atoms)))
    x = kruskal_reconstruct(KruskalModel([m_x, t_shared, f_x],
                                         5.0 * np.ones(n_atoms)))
    y = kruskal_reconstruct(KruskalModel([m_y, t_y], 5.0 * np.ones(n_atoms)))
    x = add_noise(x, snr_db, rng)
    y = add_noise(y, snr_db, rng)
    return {
        "x": x,
        "y": y,
        "m_x": m_x,
        "f_x": f_x,
        "t_shared": t_shared,
        "m_y": m_y,
        "t_y": t_y,
    }


def make_cmtf_scene(
    grid,
    *,
    n_common=1,
    n_tensor=1,
    n_matrix=1,
    n_sensors=31,
    n_times=38,
    n_freq=58,
    snr_db=20.0,
    seed=0,
    lead_width=2.0,
):
    """Planted coupled scene: a common spatial subspace shared by the tensor
    and matrix datasets plus per-modality discriminant atoms.

    Returns a dict with the spectral tensor `s_t`, the matrix `b`, the lead
    field, the source Laplacian adjacency grid, and every generating block.
    """
    rng = np.random.default_rng(seed)
    total = n_common + n_tensor + n_matrix
    spec = SceneSpec(grid=grid, n_atoms=total, seed=seed, atom_width=1.0)
    scene = make_scene(spec)
    maps = scene.spatial_maps.copy()
    if total > 1:
        winner = np.argmax(maps, axis=1)
        keep = np.zeros_like(maps, dtype=bool)
        keep[np.arange(maps.shape[0]), winner] = True
        maps = np.where(keep & (maps > 0), maps, 0.0)
        norms = np.linalg.norm(maps, axis=0)
        maps /= np.where(norms > 0, norms, 1.0)
    m_c = maps[:, :n_common]
    m_g = maps[:, n_common:n_common + n_tensor]
    m_b = maps[:, n_common + n_tensor:]
    r_t = n_common + n_tensor
    r_b = n_common + n_matrix
    t_v = np.column_stack(
        [np.cos(2 * np.pi * (j + 1) * (np.arange(n_times) + 0.5) / n_times)
         for j in range(r_t)]
    )
    t_v /= np.linalg.norm(t_v, axis=0)
    f_v = np.zeros((n_freq, r_t))
    band = n_freq // r_t
    for j in range(r_t):
        sl = slice(j * band, (j + 1) * band if j < r_t - 1 else n_freq)
        center = (sl.start + sl.stop - 1) / 2.0
        prof = np.zeros(n_freq)
        prof[sl] = np.exp(-0.5 * ((np.arange(sl.start, sl.stop) - center) / 2.0) ** 2)
        f_v[:, j] = prof / np.linalg.norm(prof)
    t_b = np.column_stack(
        [np.cos(2 * np.pi * (j + 1) * (np.arange(n_times) + 0.25) / n_times)
         for j in range(r_b)]
    )
    t_b /= np.linalg.norm(t_b, axis=0)
    k = gaussian_lead_field(grid, n_sensors, width=lead_width)
    s_clean = kruskal_reconstruct(
        KruskalModel([k @ np.hstack([m_c, m_g]), t_v, f_v], 5.0 * np.ones(r_t))
    )
    b_clean = kruskal_reconstruct(
        KruskalModel([np.hstack([m_c, m_b]), t_b], 5.0 * np.ones(r_b))
    )
    s_t = add_noise(s_clean, snr_db, rng)
    b = add_noise(b_clean, snr_db, rng)
    return {
        "s_t": s_t,
        "b": b,
        "lead_field": k,
        "m_c": m_c,
        "m_g": m_g,
        "m_b": m_b,
        "t_v": t_v,
        "f_v": f_v,
        "t_b": t_b,
    }


def make_gc_clusters(grid, n_atoms, n_lags, seed, radius=0.8, cluster_radius=1.5):
    """Sender/receiver cluster pairs with distinct lag profiles.

    Disjoint disk-shaped clusters sit on a jittered sublattice of well
    separated anchor positions; the coefficient tensor is exactly rank
    n_atoms and rescaled to the requested companion spectral radius.
    Returns (tensor, sender masks, receiver masks, lag profiles).
    """
    rng = np.random.default_rng(seed)
    coords = grid_coords(grid)
    grid = tuple(int(g) for g in grid)
    per_dim = int(np.ceil((2 * n_atoms) ** (1.0 / len(grid))))
    axes = [np.linspace(0.15 * (g - 1), 0.85 * (g - 1), max(per_dim, 2)) for g in grid]
    mesh = np.meshgrid(*axes, indexing="ij")
    anchors = np.column_stack([m.ravel() for m in mesh])
    if anchors.shape[0] < 2 * n_atoms:
        raise ValueError("grid too small for the requested number of clusters")
    order = rng.permutation(anchors.shape[0])[: 2 * n_atoms]
    centers = anchors[order] + rng.uniform(-0.3, 0.3, (2 * n_atoms, len(grid)))
    n = coords.shape[0]
    maps = np.zeros((n, 2 * n_atoms))
    for j in range(2 * n_atoms):
        d2 = np.sum((coords - centers[j]) ** 2, axis=1)
        blob = np.exp(-0.5 * d2 / (cluster_radius / 1.5) ** 2)
        blob[d2 > cluster_radius**2] = 0.0
        if not np.any(blob):
            blob[np.argmin(d2)] = 1.0
        maps[:, j] = blob / np.linalg.norm(blob)
    # resolve any residual overlap: each node belongs to its strongest cluster
    winner = np.argmax(maps, axis=1)
    keep = np.zeros_like(maps, dtype=bool)
    keep[np.arange(n), winner] = True
    maps = np.where(keep, maps, 0.0)
    maps /= np.where(np.linalg.norm(maps, axis=0) > 0, np.linalg.norm(maps, axis=0), 1.0)
    senders = maps[:, 0::2]
    receivers = maps[:, 1::2]
    lag_profiles = np.zeros((n_lags, n_atoms))
    for j in range(n_atoms):
        prof = np.zeros(n_lags)
        prof[j % n_lags] = 1.0
        if n_lags > 1:
            prof[(j + 1) % n_lags] = 0.4
        lag_profiles[:, j] = prof / np.linalg.norm(prof)
    a = np.einsum("ir,jr,lr->ijl", receivers, senders, lag_profiles)
    rho = companion_radius(a)
    if rho > 0:
        a *= radius / rho
    return a, senders > 0, receivers > 0, lag_profiles
