"""Square binary fiducial markers: bit dictionaries, set geometry, file IO.

A marker is an n x n grid of binary cells (1 = white, 0 = black) wrapped in a
one-cell black border, printed inside a one-cell white quiet zone. Geometry is
expressed in the *set frame*: the 4 outer border corners of each marker are
stored in mm, and the interior chessboard nodes (grid intersections whose four
adjacent cells alternate like a 2x2 checkerboard) are derived from the bits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

BORDER_CELLS = 1  # black border width, in cells, on every side


# --- keypoint labels ---------------------------------------------------------

CORNER = "corner"
NODE = "node"


@dataclass(frozen=True, order=True)
class KeypointLabel:
    """Identity of a marker keypoint: outer corner 0..3 or interior node index."""

    marker_id: int
    kind: str  # CORNER or NODE
    index: int


# --- bit-pattern utilities ---------------------------------------------------

def bit_rotations(bits: np.ndarray) -> list[np.ndarray]:
    """The four 90-degree rotations of a bit grid, starting with the input."""
    return [np.rot90(bits, -k) for k in range(4)]


def rotation_aware_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Minimum Hamming distance between `a` and any rotation of `b`."""
    return min(int(np.sum(a != r)) for r in bit_rotations(b))


def self_rotation_distance(bits: np.ndarray) -> int:
    """Minimum Hamming distance between `bits` and its three proper rotations."""
    return min(int(np.sum(bits != r)) for r in bit_rotations(bits)[1:])


def chessboard_nodes(bits: np.ndarray) -> list[tuple[int, int]]:
    """Grid intersections whose 2x2 cell neighborhood forms a checkerboard.

    The grid is the full (n+2) x (n+2) cell layout including the black border,
    so intersections on the border ring are examined too (for a solid border
    they never qualify). Returned coordinates (row, col) are in cell units
    from the marker's outer corner 0, row-major order.
    """
    n = bits.shape[0]
    full = np.zeros((n + 2, n + 2), dtype=np.uint8)
    full[1:-1, 1:-1] = bits
    nodes = []
    for i in range(1, n + 2):
        for j in range(1, n + 2):
            a, b = full[i - 1, j - 1], full[i - 1, j]
            c, d = full[i, j - 1], full[i, j]
            if a == d and b == c and a != b:
                nodes.append((i, j))
    return nodes


def bits_to_strings(bits: np.ndarray) -> list[str]:
    return ["".join("1" if v else "0" for v in row) for row in bits]


def bits_from_strings(rows: list[str]) -> np.ndarray:
    bits = np.array([[int(ch) for ch in row] for row in rows], dtype=np.uint8)
    if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
        raise ValueError("bit grid must be square")
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("bit grid entries must be 0 or 1")
    return bits


# --- dictionary --------------------------------------------------------------

@dataclass(frozen=True)
class MarkerDictionary:
    """An indexed list of candidate bit grids; the index is the marker id."""

    codes: tuple
    min_distance: int = 10

    def __len__(self) -> int:
        return len(self.codes)

    @cached_property
    def _rotation_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All (code, rotation) bit rows flattened, for vectorized matching."""
        rows, ids, rots = [], [], []
        for marker_id, code in enumerate(self.codes):
            for rot, rotated in enumerate(bit_rotations(code)):
                rows.append(np.asarray(rotated, dtype=np.uint8).ravel())
                ids.append(marker_id)
                rots.append(rot)
        return (np.array(rows), np.array(ids, dtype=np.intp),
                np.array(rots, dtype=np.intp))

    def match(self, bits: np.ndarray, max_hamming: int = 1):
        """Match sampled bits against all codes over 4 rotations.

        Returns (marker_id, rotation) for the unique best match with Hamming
        distance <= max_hamming, where `rotation` is the number of clockwise
        quarter turns applied to the stored code to line up with `bits`.
        Returns None when nothing qualifies or the best match is ambiguous.
        """
        table, ids, rots = self._rotation_table
        dists = np.count_nonzero(table != bits.ravel()[None, :], axis=1)
        first = int(np.argmin(dists))
        best = int(dists[first])
        if best > max_hamming:
            return None
        if np.unique(ids[dists == best]).size > 1:
            return None
        return int(ids[first]), int(rots[first])


# Output of search_dictionary(seed=3), frozen so imports stay fast and marker
# files are stable. Codes are sorted by descending chessboard-node count, so
# the low ids used by the standard benchmark sets carry the most interior
# nodes (counts: 5,5,4,4,4,4,4,4,4,3,2,2,2,2,2,2).
_DEFAULT_CODES = (
    "0000111011001001001000101",
    "0001010110011011001101010",
    "0000000000011101010001011",
    "0100110111100110101110010",
    "1000010101110001010101110",
    "1000011011101011010011011",
    "1011110010010100010110001",
    "1110100101110101110010001",
    "1110101010100000111111001",
    "0101110011011111100100111",
    "0010101000110000010100111",
    "0011011100100000100000100",
    "0100110011111010011111101",
    "1010100011111100001100100",
    "1100111110011100011101011",
    "1110011101011010100100110",
)


def search_dictionary(seed: int = 3, n_codes: int = 16, grid: int = 5,
                      min_distance: int = 10, min_self_distance: int = 6,
                      min_nodes: tuple = (4,) * 8 + (2,) * 8,
                      max_iter: int = 500_000) -> MarkerDictionary:
    """Seeded search for a rotation-robust marker dictionary.

    Simulated annealing over bit flips, minimizing the squared shortfall of
    three constraints: rotation-aware pairwise Hamming distance >=
    min_distance, distance of each code to its own rotations >=
    min_self_distance (so the decoded rotation is unambiguous), and at least
    min_nodes[slot] interior chessboard nodes per code (material for the
    keypoint augmentation). Deterministic for a fixed seed; the shipped
    default dictionary is the seed-3 result.
    """
    if len(min_nodes) != n_codes:
        raise ValueError("min_nodes must list one bound per code")
    cells = grid * grid
    # Bit-permutation tables for the three proper rotations: flipping one
    # cell updates all four rotation masks in O(1).
    perm1 = [0] * cells
    for r in range(grid):
        for c in range(grid):
            perm1[r * grid + c] = c * grid + (grid - 1 - r)
    perm2 = [perm1[perm1[i]] for i in range(cells)]
    perm3 = [perm1[perm2[i]] for i in range(cells)]

    def masks_of(bits: np.ndarray) -> list[int]:
        m0 = 0
        for r in range(grid):
            for c in range(grid):
                if bits[r, c]:
                    m0 |= 1 << (r * grid + c)
        m1 = m2 = m3 = 0
        for i in range(cells):
            if m0 >> i & 1:
                m1 |= 1 << perm1[i]
                m2 |= 1 << perm2[i]
                m3 |= 1 << perm3[i]
        return [m0, m1, m2, m3]

    def pair_term(masks_a: list[int], mask_b: int) -> int:
        d = min((mask_b ^ m).bit_count() for m in masks_a)
        return max(0, min_distance - d) ** 2

    def unary_term(bits: np.ndarray, masks: list[int], slot: int) -> int:
        sd = min((masks[0] ^ masks[k]).bit_count() for k in (1, 2, 3))
        s = max(0, min_self_distance - sd) ** 2
        s += max(0, min_nodes[slot] - len(chessboard_nodes(bits))) ** 2
        return s

    rng = np.random.default_rng(seed)
    codes = [rng.integers(0, 2, (grid, grid)).astype(np.uint8)
             for _ in range(n_codes)]
    masks = [masks_of(c) for c in codes]
    pair = [[0] * n_codes for _ in range(n_codes)]
    for i in range(n_codes):
        for j in range(i + 1, n_codes):
            pair[i][j] = pair[j][i] = pair_term(masks[i], masks[j][0])
    un = [unary_term(codes[i], masks[i], i) for i in range(n_codes)]
    cur = (sum(pair[i][j] for i in range(n_codes) for j in range(i + 1, n_codes))
           + sum(un))
    moves = rng.integers(0, n_codes * cells, size=max_iter)
    uniform = rng.random(size=max_iter)
    t_hot, t_cold = 4.0, 0.02
    ratio = t_cold / t_hot
    for it in range(max_iter):
        if cur == 0:
            break
        temp = t_hot * ratio ** (it / max_iter)
        ci, b = divmod(int(moves[it]), cells)
        codes[ci][b // grid, b % grid] ^= 1
        old = masks[ci]
        nm = [old[0] ^ (1 << b), old[1] ^ (1 << perm1[b]),
              old[2] ^ (1 << perm2[b]), old[3] ^ (1 << perm3[b])]
        new_row = [0 if j == ci else pair_term(nm, masks[j][0])
                   for j in range(n_codes)]
        nu = unary_term(codes[ci], nm, ci)
        delta = sum(new_row) - sum(pair[ci]) + nu - un[ci]
        if delta <= 0 or uniform[it] < math.exp(-delta / temp):
            masks[ci] = nm
            for j in range(n_codes):
                pair[ci][j] = new_row[j]
                pair[j][ci] = new_row[j]
            un[ci] = nu
            cur += delta
        else:
            codes[ci][b // grid, b % grid] ^= 1
    if cur != 0:
        raise RuntimeError("dictionary search did not converge")
    codes.sort(key=lambda c: (-len(chessboard_nodes(c)), c.tobytes()))
    return MarkerDictionary(codes=tuple(codes), min_distance=min_distance)


@lru_cache(maxsize=1)
def default_dictionary() -> MarkerDictionary:
    codes = tuple(
        np.array([[int(row[r * 5 + c]) for c in range(5)] for r in range(5)],
                 dtype=np.uint8)
        for row in _DEFAULT_CODES)
    return MarkerDictionary(codes=codes, min_distance=10)


# --- markers and sets --------------------------------------------------------

@dataclass(frozen=True)
class Marker:
    """One marker's identity, bit pattern and 3D corner geometry (set frame).

    Outer corners are ordered to match the bit grid: corner 0 at cell (0, 0)
    of the bordered grid, then clockwise when the marker is viewed front-on
    (x right, y down in marker-local coordinates).
    """

    aruco_id: int
    bits: np.ndarray
    outer_corners_3d: np.ndarray  # (4, 3) mm

    def __post_init__(self):
        corners = np.asarray(self.outer_corners_3d, dtype=float).reshape(4, 3)
        object.__setattr__(self, "outer_corners_3d", corners)
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=np.uint8))
        # Corners must form a planar square traversed in order.
        c0, c1, c2, c3 = corners
        u, v = c1 - c0, c3 - c0
        side = np.linalg.norm(u)
        if side <= 0:
            raise ValueError("degenerate marker corners")
        if abs(np.linalg.norm(v) - side) > 1e-6 * side + 1e-9:
            raise ValueError("marker corners do not form a square")
        if abs(np.dot(u, v)) > 1e-6 * side * side:
            raise ValueError("marker corner edges are not orthogonal")
        if np.linalg.norm(c2 - (c1 + c3 - c0)) > 1e-6 * side:
            raise ValueError("marker corners are not planar/consistent")

    @property
    def grid_cells(self) -> int:
        """Cells per side including the black border."""
        return self.bits.shape[0] + 2 * BORDER_CELLS

    def local_to_3d(self, grid_xy: np.ndarray) -> np.ndarray:
        """Map marker-local grid coordinates (cell units, x right / y down) to mm."""
        g = np.asarray(grid_xy, dtype=float).reshape(-1, 2) / self.grid_cells
        c0, c1, _, c3 = self.outer_corners_3d
        out = c0 + g[:, :1] * (c1 - c0) + g[:, 1:] * (c3 - c0)
        return out if np.asarray(grid_xy).ndim > 1 else out[0]

    def node_grid_coords(self) -> np.ndarray:
        """(K, 2) grid coordinates (x=col, y=row) of eligible chessboard nodes."""
        nodes = chessboard_nodes(self.bits)
        if not nodes:
            return np.zeros((0, 2))
        return np.array([(j, i) for (i, j) in nodes], dtype=float)

    def interior_nodes_3d(self) -> np.ndarray:
        coords = self.node_grid_coords()
        if coords.shape[0] == 0:
            return np.zeros((0, 3))
        return self.local_to_3d(coords)


@dataclass(frozen=True)
class MarkerSet:
    """A rigid arrangement of markers with a shared dictionary."""

    set_id: str
    cell_mm: float
    markers: tuple
    dictionary: MarkerDictionary

    def __post_init__(self):
        ids = [m.aruco_id for m in self.markers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate aruco_id in marker set")
        for m in self.markers:
            if not (0 <= m.aruco_id < len(self.dictionary)):
                raise ValueError(f"aruco_id {m.aruco_id} not in dictionary")
            if not np.array_equal(m.bits, self.dictionary.codes[m.aruco_id]):
                raise ValueError(
                    f"marker {m.aruco_id} bits disagree with the dictionary")
            side = m.grid_cells * self.cell_mm
            actual = np.linalg.norm(m.outer_corners_3d[1] - m.outer_corners_3d[0])
            if abs(actual - side) > 1e-6 * side:
                raise ValueError(
                    f"marker {m.aruco_id} side {actual:.6f} mm does not match "
                    f"cell size ({side:.6f} mm expected)")

    def marker(self, aruco_id: int) -> Marker:
        for m in self.markers:
            if m.aruco_id == aruco_id:
                return m
        raise KeyError(f"marker {aruco_id} not in set {self.set_id}")

    @property
    def aruco_ids(self) -> set:
        return {m.aruco_id for m in self.markers}

    def reference_points(self) -> dict:
        """All labeled 3D reference points (set frame): corners + nodes."""
        points: dict[KeypointLabel, np.ndarray] = {}
        for m in self.markers:
            for k in range(4):
                points[KeypointLabel(m.aruco_id, CORNER, k)] = m.outer_corners_3d[k]
            nodes = m.interior_nodes_3d()
            for idx in range(nodes.shape[0]):
                points[KeypointLabel(m.aruco_id, NODE, idx)] = nodes[idx]
        return points

    def position_of(self, label: KeypointLabel) -> np.ndarray:
        m = self.marker(label.marker_id)
        if label.kind == CORNER:
            return m.outer_corners_3d[label.index]
        return m.interior_nodes_3d()[label.index]


def square_marker(aruco_id: int, bits: np.ndarray, center_xy: np.ndarray,
                  cell_mm: float) -> Marker:
    """Axis-aligned coplanar marker (set-frame z = 0) centered at (cx, cy) mm."""
    n_cells = bits.shape[0] + 2 * BORDER_CELLS
    h = 0.5 * n_cells * cell_mm
    cx, cy = center_xy
    corners = np.array([
        [cx - h, cy - h, 0.0],
        [cx + h, cy - h, 0.0],
        [cx + h, cy + h, 0.0],
        [cx - h, cy + h, 0.0],
    ])
    return Marker(aruco_id=aruco_id, bits=bits, outer_corners_3d=corners)


def build_planar_set(set_id: str, aruco_ids, centers_xy, cell_mm: float = 4.0,
                     dictionary: MarkerDictionary | None = None) -> MarkerSet:
    dictionary = dictionary or default_dictionary()
    markers = tuple(
        square_marker(aid, dictionary.codes[aid], center, cell_mm)
        for aid, center in zip(aruco_ids, centers_xy))
    return MarkerSet(set_id=set_id, cell_mm=cell_mm, markers=markers,
                     dictionary=dictionary)


def standard_set(set_id: str, n_markers: int, first_id: int = 0,
                 cell_mm: float = 4.0,
                 dictionary: MarkerDictionary | None = None) -> MarkerSet:
    """Compact coplanar layouts used by the synthetic benchmarks.

    2 markers: side by side. 5 markers: quincunx (4 corners + center) so the
    footprint stays inside the stereo field of view at the nearest test range.
    """
    dictionary = dictionary or default_dictionary()
    side = (dictionary.codes[first_id].shape[0] + 2 * BORDER_CELLS) * cell_mm
    pitch = side + 2.0 * cell_mm  # one quiet-zone cell per neighbor plus slack
    if n_markers == 2:
        centers = [(-pitch / 2, 0.0), (pitch / 2, 0.0)]
    elif n_markers == 5:
        centers = [(-pitch, -pitch), (pitch, -pitch), (0.0, 0.0),
                   (-pitch, pitch), (pitch, pitch)]
    else:
        raise ValueError("standard_set supports 2 or 5 markers")
    ids = list(range(first_id, first_id + n_markers))
    if ids[-1] >= len(dictionary):
        raise ValueError("not enough dictionary codes for the requested ids")
    return build_planar_set(set_id, ids, centers, cell_mm, dictionary)


# --- file format -------------------------------------------------------------

FORMAT_TAG = "fidus-markerset-v1"


def save_marker_set(markerset: MarkerSet, path) -> None:
    doc = {
        "format": FORMAT_TAG,
        "set_id": markerset.set_id,
        "cell_mm": markerset.cell_mm,
        "dictionary": {
            "min_distance": markerset.dictionary.min_distance,
            "codes": [bits_to_strings(c) for c in markerset.dictionary.codes],
        },
        "markers": [
            {
                "aruco_id": m.aruco_id,
                "bits": bits_to_strings(m.bits),
                "outer_corners_mm": m.outer_corners_3d.tolist(),
            }
            for m in markerset.markers
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_marker_set(path) -> MarkerSet:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != FORMAT_TAG:
        raise ValueError(f"not a {FORMAT_TAG} file: {path}")
    dictionary = MarkerDictionary(
        codes=tuple(bits_from_strings(rows) for rows in doc["dictionary"]["codes"]),
        min_distance=int(doc["dictionary"]["min_distance"]),
    )
    markers = tuple(
        Marker(aruco_id=int(m["aruco_id"]),
               bits=bits_from_strings(m["bits"]),
               outer_corners_3d=np.array(m["outer_corners_mm"], dtype=float))
        for m in doc["markers"])
    return MarkerSet(set_id=str(doc["set_id"]), cell_mm=float(doc["cell_mm"]),
                     markers=markers, dictionary=dictionary)
