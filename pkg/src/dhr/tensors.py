"""Dense array types shared by the pipeline, mask/score conversions, and NPY/PNG file I/O."""

from PIL import Image, UnidentifiedImageError

from .utils import *

IGNORE = 255

# dtypes accepted on disk, keyed by their NPY descriptor
_NPY_DTYPES = {"<f4": np.dtype("<f4"), "|u1": np.dtype("|u1")}


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class ScoreStack:
    """Per-class soft scores over an image grid, shape (C, H, W), every value in [0, 1].

    When `has_background` is set, channel 0 is the background class."""

    values: np.ndarray
    has_background: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] < 1:
            raise DomainError(f"ScoreStack expects shape (C, H, W) with C >= 1, got {v.shape}.")
        if not np.all(np.isfinite(v)):
            raise DomainError("ScoreStack values must be finite.")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise DomainError(
                f"ScoreStack values must lie in [0, 1], got [{v.min()}, {v.max()}]."
            )
        object.__setattr__(self, "values", _readonly(v))

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def flat(self) -> np.ndarray:
        """The scores as an N×C matrix, one row per pixel in row-major order."""
        return self.values.reshape(self.num_classes, -1).T

    @staticmethod
    def from_flat(
        q: np.ndarray, height: int, width: int, has_background: bool = True
    ) -> "ScoreStack":
        return ScoreStack(np.asarray(q).T.reshape(-1, height, width), has_background)

    def __repr__(self):
        c, (h, w) = self.num_classes, self.shape
        return f"ScoreStack(C={c}, H={h}, W={w}, has_background={self.has_background})"


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense embedding field of shape (D, H, W)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] < 1:
            raise DomainError(f"FeatureMap expects shape (D, H, W) with D >= 1, got {v.shape}.")
        if not np.all(np.isfinite(v)):
            raise DomainError("FeatureMap values must be finite.")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def resized(self, height: int, width: int) -> "FeatureMap":
        if (height, width) == self.shape:
            return self
        return FeatureMap(resample(self.values, height, width, "bilinear"))

    def __repr__(self):
        return f"FeatureMap(D={self.dim}, H={self.shape[0]}, W={self.shape[1]})"


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Hard class index per pixel, with `IGNORE` (255) marking unlabeled pixels."""

    labels: np.ndarray

    IGNORE: ClassVar[int] = IGNORE

    def __post_init__(self):
        a = np.asarray(self.labels)
        if a.ndim != 2:
            raise DomainError(f"LabelMask expects shape (H, W), got {a.shape}.")
        if a.dtype != np.uint8:
            if not (np.issubdtype(a.dtype, np.integer) or a.dtype == np.bool_):
                raise UnsupportedError(f"LabelMask expects integer labels, got {a.dtype}.")
            if a.size and (a.min() < 0 or a.max() > 255):
                raise DomainError("LabelMask labels must lie in [0, 255].")
            a = a.astype(np.uint8)
        object.__setattr__(self, "labels", _readonly(a))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape[0], self.labels.shape[1]

    def counted(self) -> np.ndarray:
        return self.labels != IGNORE

    def check_classes(self, num_classes: int) -> None:
        bad = (self.labels >= num_classes) & (self.labels != IGNORE)
        if bad.any():
            raise DomainError(
                f"Label {int(self.labels[bad].max())} is out of range for {num_classes} classes."
            )

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelMask) and np.array_equal(self.labels, other.labels)

    __hash__ = None  # type: ignore


@dataclass(frozen=True, eq=False)
class SceneBundle:
    """Everything the pipeline knows about one image.

    `cams` holds foreground classes only: channel k is class k + 1, so it has
    `num_classes - 1` channels. `image_labels` are the foreground classes present
    in the image."""

    id: str
    cams: ScoreStack
    base_mask: ScoreStack | LabelMask
    uss_features: FeatureMap
    wss_features: FeatureMap
    image_labels: frozenset[int]
    num_classes: int
    rgb: np.ndarray | None = None
    ground_truth: LabelMask | None = None

    def __post_init__(self):
        object.__setattr__(self, "image_labels", frozenset(int(c) for c in self.image_labels))
        C = self.num_classes
        if C < 2:
            raise DomainError(f"[{self.id}] a scene needs background plus at least one class.")
        if self.cams.has_background or self.cams.num_classes != C - 1:
            raise DomainError(
                f"[{self.id}] cams must hold {C - 1} foreground channels, got {self.cams.num_classes}."
            )
        for c in self.image_labels:
            if not 1 <= c < C:
                raise DomainError(f"[{self.id}] image label {c} is not a foreground class of {C}.")
        masses = self.cams.values.reshape(C - 1, -1).sum(axis=1)
        for k in np.flatnonzero(masses > 0):
            if int(k) + 1 not in self.image_labels:
                raise DomainError(
                    f"[{self.id}] class {int(k) + 1} has CAM mass but is not an image label."
                )
        grid = self.cams.shape
        if self.base_mask.shape != grid:
            raise DomainError(f"[{self.id}] base mask grid {self.base_mask.shape} != {grid}.")
        if isinstance(self.base_mask, ScoreStack):
            assert_eq(self.base_mask.num_classes, C)
        else:
            self.base_mask.check_classes(C)
        if self.rgb is not None:
            rgb = np.asarray(self.rgb)
            if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
                raise DomainError(f"[{self.id}] rgb must be an H×W×3 uint8 image.")
            object.__setattr__(self, "rgb", _readonly(rgb))
        if self.ground_truth is not None:
            if self.ground_truth.shape != grid:
                raise DomainError(f"[{self.id}] ground truth grid differs from the cams grid.")
            self.ground_truth.check_classes(C)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cams.shape

    def base_scores(self) -> ScoreStack:
        """The base mask canonicalized to a one-hot stack, whether it was given soft or hard."""
        if isinstance(self.base_mask, LabelMask):
            return one_hot(self.base_mask, self.num_classes)
        return one_hot(argmax_labels(self.base_mask), self.num_classes)


# -----------------------------------------------------------------------------
# conversions


def argmax_labels(scores: ScoreStack) -> LabelMask:
    """Per-pixel hard label. Ties go to the smallest class index."""
    if scores.num_classes >= IGNORE:
        raise UnsupportedError(f"At most {IGNORE} classes fit into a LabelMask.")
    return LabelMask(np.argmax(scores.values, axis=0).astype(np.uint8))


def one_hot(mask: LabelMask, num_classes: int, has_background: bool = True) -> ScoreStack:
    """Exact 0/1 stack of `mask`. IGNORE pixels become all-zero columns."""
    mask.check_classes(num_classes)
    classes = np.arange(num_classes)[:, None, None]
    return ScoreStack((classes == mask.labels[None]).astype(np.float64), has_background)


def _source_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # pixel-center alignment: output center i maps to (i + 0.5) * n_in / n_out - 0.5
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def _nearest_coords(n_in: int, n_out: int) -> np.ndarray:
    x = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.minimum(x, n_in - 1)


def resample(array: np.ndarray, new_h: int, new_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize the last two axes of `array` to (new_h, new_w).

    `bilinear` returns float64 and suits features and scores; `nearest` keeps the dtype
    and suits label masks."""
    a = np.asarray(array)
    if new_h < 1 or new_w < 1:
        raise DomainError(f"Target size must be positive, got {new_h}×{new_w}.")
    if a.ndim < 2 or a.shape[-1] == 0 or a.shape[-2] == 0:
        raise DomainError(f"Cannot resample an array of shape {a.shape}.")
    h, w = a.shape[-2:]
    if mode == "nearest":
        rows, cols = _nearest_coords(h, new_h), _nearest_coords(w, new_w)
        return a[..., rows, :][..., cols]
    if mode != "bilinear":
        raise DomainError(f"Unknown resample mode: {mode!r}.")
    a = a.astype(np.float64)
    r0, r1, rw = _source_coords(h, new_h)
    top, bottom = a[..., r0, :], a[..., r1, :]
    # lerp form keeps constant fields exact
    rows = top + rw[:, None] * (bottom - top)
    c0, c1, cw = _source_coords(w, new_w)
    left, right = rows[..., c0], rows[..., c1]
    return left + cw * (right - left)


# -----------------------------------------------------------------------------
# NPY I/O


def load_npy(path: Path | str) -> np.ndarray:
    """Read an NPY v1.0 file holding a little-endian float32 or uint8 C-order array."""
    fmt = np.lib.format
    with open(path, "rb") as f:
        try:
            version = fmt.read_magic(f)
        except ValueError as e:
            raise FormatError(f"{path}: bad NPY magic ({e}).") from e
        if version != (1, 0):
            raise FormatError(f"{path}: only NPY version 1.0 is supported, got {version}.")
        try:
            shape, fortran_order, dtype = fmt.read_array_header_1_0(f)
        except ValueError as e:
            raise FormatError(f"{path}: malformed NPY header ({e}).") from e
        if fortran_order:
            raise FormatError(f"{path}: fortran-order arrays are not supported.")
        if dtype.str not in _NPY_DTYPES:
            raise UnsupportedError(f"{path}: unsupported dtype {dtype.str}.")
        if len(shape) > 3:
            raise UnsupportedError(f"{path}: rank {len(shape)} arrays are not supported.")
        count = int(np.prod(shape, dtype=np.int64))
        data = f.read(count * dtype.itemsize)
    if len(data) != count * dtype.itemsize:
        raise FormatError(f"{path}: truncated data, expected {count} items.")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def save_npy(array: np.ndarray, path: Path | str) -> None:
    """Write `array` as NPY v1.0. Floats are stored as float32, bools and bytes as uint8."""
    a = np.asarray(array)
    if a.ndim > 3:
        raise UnsupportedError(f"Rank {a.ndim} arrays are not supported.")
    if a.dtype == np.bool_ or a.dtype == np.uint8:
        a = a.astype(_NPY_DTYPES["|u1"])
    elif np.issubdtype(a.dtype, np.floating):
        if not np.all(np.isfinite(a)):
            raise DomainError("Only finite arrays can be saved.")
        a = a.astype(_NPY_DTYPES["<f4"])
    else:
        raise UnsupportedError(f"Cannot store dtype {a.dtype}; use float32 or uint8.")
    a = np.ascontiguousarray(a)
    fmt = np.lib.format
    with open(path, "wb") as f:
        fmt.write_array_header_1_0(f, fmt.header_data_from_array_1_0(a))
        f.write(a.tobytes(order="C"))


# -----------------------------------------------------------------------------
# PNG I/O


def voc_palette(n: int = 256) -> list[int]:
    """The standard Pascal VOC colormap, flattened to [r0, g0, b0, r1, ...]."""
    palette = list[int]()
    for i in range(n):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        palette += [r, g, b]
    return palette


def _open_png(path: Path | str) -> Image.Image:
    try:
        return Image.open(path)
    except UnidentifiedImageError as e:
        raise FormatError(f"{path}: not a readable image.") from e


def load_mask_png(path: Path | str) -> LabelMask:
    with _open_png(path) as im:
        if im.mode not in ("L", "P"):
            raise FormatError(
                f"{path}: masks must be 8-bit grayscale or paletted, got mode {im.mode!r}."
            )
        return LabelMask(np.array(im, dtype=np.uint8))


def save_mask_png(mask: LabelMask, path: Path | str) -> None:
    """Save as a paletted PNG: pixel value = class index, colored with the VOC colormap."""
    im = Image.fromarray(np.ascontiguousarray(mask.labels))
    im.putpalette(voc_palette())
    im.save(path, format="PNG")


def load_rgb_png(path: Path | str) -> np.ndarray:
    with _open_png(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def save_rgb_png(rgb: np.ndarray, path: Path | str) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path, format="PNG")
