"""Procedural geo-tagged panoramic world with known view semantics.

Each place owns ``A`` anchor vectors spread around the compass. A rendered
view is a ``T x D_in`` token matrix whose rows sample the panorama at evenly
spaced angles across the field of view; every row is a raised-cosine blend of
the anchors nearest to its angle. Occlusion overwrites a contiguous run of
rows with one of a small pool of occluder vectors shared by every place.

Headings are stored on every image for baselines and analysis only.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError, ManifestParseError, ParameterError
from .geogrid import UtmPoint

TOKEN_MAGIC = b"MVPRTOK1"
TOKEN_HEADER = struct.Struct("<8sII")
DEFAULT_ORIGIN = (553000.0, 4182000.0)


@dataclass
class Place:
    position: UtmPoint
    anchors: np.ndarray          # (A, D_in), unit rows
    anchor_headings: np.ndarray  # (A,), degrees, ascending


@dataclass
class World:
    places: list[Place]
    cell_size: float
    seed: int
    occluders: np.ndarray        # (n_occluders, D_in), unit rows
    tokens: int
    config: dict = field(default_factory=dict)

    @property
    def d_in(self) -> int:
        return self.occluders.shape[1]


@dataclass
class GeoImage:
    id: str
    position: UtmPoint
    heading: float
    tokens: np.ndarray
    true_group: int | None = None  # None when unknown (ingested data)
    occluded: bool = False
    place: int | None = None


@dataclass(frozen=True)
class OcclusionSpec:
    """Fraction ``rho`` of token rows to cover. ``occluder`` and ``start``
    are drawn from the render seed when left as None."""

    rho: float = 0.0
    occluder: int | None = None
    start: int | None = None

    @property
    def active(self) -> bool:
        return self.rho > 0


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_anchors(rng, A, d_in, max_cos=0.2, retries=1000):
    for _ in range(retries):
        a = _unit_rows(rng, A, d_in)
        c = a @ a.T
        np.fill_diagonal(c, -np.inf)
        if A == 1 or c.max() < max_cos:
            return a
    raise GenerationError(f"could not sample {A} anchors in {d_in} dims with pairwise cosine < {max_cos}")


def generate_world(
    num_cells: int,
    places_per_cell: int,
    A: int,
    D_in: int,
    seed: int,
    *,
    tokens: int = 8,
    cell_size: float = 10.0,
    cell_stride: int = 3,
    n_occluders: int = 4,
    heading_jitter: float = 0.1,
    env_seed: int = 0,
    origin: tuple[float, float] = DEFAULT_ORIGIN,
) -> World:
    """Build a deterministic world of ``num_cells`` occupied grid cells.

    Occupied cells sit ``cell_stride`` cells apart on a square lattice so that
    places in different cells are more than 25 m apart for the default stride.
    Occluders depend only on ``env_seed``, so worlds with different ``seed``
    share the same occluder pool.
    """
    if min(num_cells, places_per_cell, A, tokens, n_occluders, cell_stride) < 1:
        raise ParameterError("counts must be >= 1")
    if D_in < 4:
        raise ParameterError(f"D_in must be >= 4, got {D_in}")
    if not cell_size > 0:
        raise ParameterError("cell_size must be positive")
    rng = np.random.default_rng([seed, 1])
    side = math.ceil(math.sqrt(num_cells))
    spacing = 360.0 / A
    places = []
    for c in range(num_cells):
        ci, cj = divmod(c, side)
        x0 = origin[0] + ci * cell_stride * cell_size
        y0 = origin[1] + cj * cell_stride * cell_size
        for _ in range(places_per_cell):
            off = rng.uniform(0.05 * cell_size, 0.95 * cell_size, size=2)
            anchors = _sample_anchors(rng, A, D_in)
            start = rng.uniform(0.0, spacing)
            jit = rng.uniform(-1.0, 1.0, size=A) * heading_jitter * spacing
            heads = np.mod(start + spacing * np.arange(A) + jit, 360.0)
            order = np.argsort(heads, kind="stable")
            places.append(Place(UtmPoint(float(x0 + off[0]), float(y0 + off[1])), anchors[order], heads[order]))
    occluders = _unit_rows(np.random.default_rng([env_seed, 2]), n_occluders, D_in)
    config = dict(num_cells=num_cells, places_per_cell=places_per_cell, A=A, D_in=D_in, seed=seed,
                  tokens=tokens, cell_size=cell_size, cell_stride=cell_stride, n_occluders=n_occluders,
                  heading_jitter=heading_jitter, env_seed=env_seed)
    return World(places, float(cell_size), seed, occluders, tokens, config)


def crop_schedule(start_angles, step: float) -> list[float]:
    """Headings ``a, a+step, ..., a+360-step`` for every start angle, sorted."""
    if not 0 < step <= 360:
        raise ParameterError(f"step must be in (0, 360], got {step}")
    n = 360.0 / step
    if abs(n - round(n)) > 1e-9:
        raise ParameterError(f"step {step} does not divide 360")
    out = {float(np.mod(a + i * step, 360.0)) for a in start_angles for i in range(int(round(n)))}
    return sorted(out)


def _angdiff(a, b):
    """Signed smallest difference a - b in degrees, in [-180, 180)."""
    return np.mod(a - b + 180.0, 360.0) - 180.0


def anchor_weights(place: Place, angles) -> np.ndarray:
    """Raised-cosine weight of every anchor at every angle, shape (len(angles), A)."""
    A = len(place.anchor_headings)
    support = 360.0 / A
    d = np.abs(_angdiff(np.asarray(angles, dtype=float)[:, None], place.anchor_headings[None, :]))
    return np.where(d < support, 0.5 * (1.0 + np.cos(np.pi * d / support)), 0.0)


def token_angles(heading: float, fov: float, T: int) -> np.ndarray:
    return heading + fov * ((np.arange(T) + 0.5) / T - 0.5)


def render_view(
    world: World,
    place_index: int,
    heading: float,
    fov: float = 90.0,
    noise_sigma: float = 0.0,
    occlusion: OcclusionSpec = OcclusionSpec(),
    seed: int = 0,
    image_id: str | None = None,
) -> GeoImage:
    if not 0 <= place_index < len(world.places):
        raise IndexError(f"place_index {place_index} out of range [0, {len(world.places)})")
    if not 0 < fov <= 360:
        raise ParameterError(f"fov must be in (0, 360], got {fov}")
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be >= 0")
    if not 0 <= occlusion.rho <= 1:
        raise ParameterError(f"occlusion fraction must be in [0, 1], got {occlusion.rho}")
    place = world.places[place_index]
    heading = float(np.mod(heading, 360.0))
    T = world.tokens
    w = anchor_weights(place, token_angles(heading, fov, T))
    tokens = w @ place.anchors
    true_group = int(np.argmax(w.sum(axis=0)))
    rng = np.random.default_rng([seed, place_index, 7])
    if noise_sigma > 0:
        tokens = tokens + noise_sigma * rng.standard_normal(tokens.shape)
    occluded = False
    if occlusion.active:
        n = int(round(occlusion.rho * T))
        if n > 0:
            which = occlusion.occluder if occlusion.occluder is not None else int(rng.integers(len(world.occluders)))
            start = occlusion.start if occlusion.start is not None else int(rng.integers(0, T - n + 1))
            tokens[start:start + n] = world.occluders[which]
            occluded = True
    if image_id is None:
        image_id = f"p{place_index:05d}_h{heading:07.3f}"
    return GeoImage(image_id, place.position, heading, tokens, true_group, occluded, place_index)


def render_crops(
    world: World,
    start_angles=(0.0, 30.0),
    step: float = 60.0,
    fov: float = 90.0,
    noise_sigma: float = 0.05,
    occlusion_prob: float = 0.0,
    rho: float = 0.3,
    seed: int = 0,
    prefix: str = "t",
) -> list[GeoImage]:
    """Panorama crops of every place at the scheduled headings.

    Each crop is occluded independently with probability ``occlusion_prob``.
    """
    heads = crop_schedule(start_angles, step)
    out = []
    for pi in range(len(world.places)):
        rng = np.random.default_rng([seed, pi, 11])
        occ_flags = rng.random(len(heads)) < occlusion_prob
        for j, h in enumerate(heads):
            occ = OcclusionSpec(rho) if occ_flags[j] else OcclusionSpec()
            out.append(render_view(world, pi, h, fov, noise_sigma, occ, seed=hash_seed(seed, pi, j),
                                   image_id=f"{prefix}{pi:05d}_{j:02d}"))
    return out


def render_queries(
    world: World,
    per_place: int = 2,
    fov: float = 90.0,
    noise_sigma: float = 0.05,
    rho: float = 0.0,
    seed: int = 0,
    prefix: str = "q",
) -> list[GeoImage]:
    """Views at uniformly random headings; all occluded when ``rho > 0``."""
    out = []
    for pi in range(len(world.places)):
        rng = np.random.default_rng([seed, pi, 13])
        for j, h in enumerate(rng.uniform(0.0, 360.0, size=per_place)):
            out.append(render_view(world, pi, float(h), fov, noise_sigma, OcclusionSpec(rho),
                                   seed=hash_seed(seed, pi, 1000 + j), image_id=f"{prefix}{pi:05d}_{j:02d}"))
    return out


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --- manifest + token sidecar -------------------------------------------------

def sidecar_path(manifest) -> Path:
    return Path(str(manifest) + ".tokens")


def truth_path(manifest) -> Path:
    return Path(str(manifest) + ".truth")


def write_manifest(images, path, tokens_path=None, with_truth: bool = True) -> None:
    """Write ``id@east@north@heading@tokens_offset`` lines plus the binary sidecar.

    With ``with_truth`` a ``.truth`` file (``id@true_group@occluded``) is
    written next to the manifest; readers of the manifest ignore it.
    """
    path = Path(path)
    tokens_path = Path(tokens_path) if tokens_path else sidecar_path(path)
    if images:
        T, D = images[0].tokens.shape
    else:
        T, D = 0, 0
    lines, truth = [], []
    with open(tokens_path, "wb") as fh:
        fh.write(TOKEN_HEADER.pack(TOKEN_MAGIC, T, D))
        for im in images:
            if im.tokens.shape != (T, D):
                raise ParameterError(f"image {im.id} has token shape {im.tokens.shape}, expected {(T, D)}")
            if "@" in im.id:
                raise ParameterError(f"image id {im.id!r} contains '@'")
            offset = fh.tell()
            fh.write(np.ascontiguousarray(im.tokens, dtype="<f4").tobytes())
            lines.append(f"{im.id}@{im.position[0]!r}@{im.position[1]!r}@{im.heading!r}@{offset}\n")
            tg = "unknown" if im.true_group is None else str(im.true_group)
            truth.append(f"{im.id}@{tg}@{int(im.occluded)}\n")
    path.write_text("".join(lines), encoding="utf-8")
    if with_truth:
        truth_path(path).write_text("".join(truth), encoding="utf-8")


def load_manifest(path, tokens_path=None) -> list[GeoImage]:
    """Read a manifest and its token sidecar. Blank lines are skipped."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    records = []
    for no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("@")
        if len(parts) != 5:
            raise ManifestParseError(no, f"expected 5 '@'-separated fields, got {len(parts)}")
        iid, east, north, heading, offset = parts
        try:
            e, n, h = float(east), float(north), float(heading)
        except ValueError as exc:
            raise ManifestParseError(no, f"non-numeric coordinate or heading ({exc})") from None
        try:
            off = int(offset)
        except ValueError:
            raise ManifestParseError(no, f"non-integer tokens_offset {offset!r}") from None
        if not all(map(math.isfinite, (e, n, h))):
            raise ManifestParseError(no, "non-finite coordinate or heading")
        records.append((iid, e, n, h, off))
    if not records:
        return []
    tokens_path = Path(tokens_path) if tokens_path else sidecar_path(path)
    blob = tokens_path.read_bytes()
    if len(blob) < TOKEN_HEADER.size:
        raise OSError(f"{tokens_path}: truncated token header")
    magic, T, D = TOKEN_HEADER.unpack_from(blob, 0)
    if magic != TOKEN_MAGIC:
        raise OSError(f"{tokens_path}: bad magic {magic!r}")
    size = T * D * 4
    out = []
    for iid, e, n, h, off in records:
        if off < TOKEN_HEADER.size or off + size > len(blob):
            raise OSError(f"{tokens_path}: offset {off} for {iid} outside file")
        tok = np.frombuffer(blob, dtype="<f4", count=T * D, offset=off).reshape(T, D).astype(np.float64)
        out.append(GeoImage(iid, UtmPoint(e, n), float(np.mod(h, 360.0)), tok, None, False, None))
    return out


def load_truth(manifest) -> dict[str, tuple[int | None, bool]]:
    """Ground-truth groups written by ``write_manifest``; empty if absent."""
    p = truth_path(manifest)
    if not p.exists():
        return {}
    out = {}
    for line in p.read_text(encoding="utf-8").splitlines():
        if line.strip():
            iid, tg, occ = line.split("@")
            out[iid] = (None if tg == "unknown" else int(tg), occ == "1")
    return out


def load_dataset(path) -> list[GeoImage]:
    """``load_manifest`` plus ground truth from the ``.truth`` file when present."""
    images = load_manifest(path)
    truth = load_truth(path)
    for im in images:
        if im.id in truth:
            im.true_group, im.occluded = truth[im.id]
    return images
