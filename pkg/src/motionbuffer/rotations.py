"""6D rotation features and conversions to/from rotation matrices.

The 6D representation stores the first two columns of a rotation matrix as a
flat vector ``[a1, a2]`` (two 3-vectors). Decoding runs Gram-Schmidt on the
pair and completes the third column with a cross product, which makes the
map continuous and the output always a proper rotation.

All functions accept a single 6-vector / 3x3 matrix or arbitrarily batched
arrays ``(..., 6)`` / ``(..., 3, 3)``.
"""

import numpy as np

DEGENERATE_NORM_EPS = 1e-8


class DegenerateRotationError(ValueError):
    """Raised when 6D features cannot span a plane (zero or parallel vectors)."""


def sixd_to_matrix(features, clamp=False):
    """Decode 6D rotation features into rotation matrices.

    Parameters
    ----------
    features : array_like, shape (..., 6)
        Two stacked 3-vectors (the would-be first two matrix columns).
    clamp : bool
        If False (data-time behaviour), degenerate inputs raise
        :class:`DegenerateRotationError`. If True (model-output behaviour),
        near-degenerate inputs are re-orthogonalized by jittering with
        ``DEGENERATE_NORM_EPS`` instead of raising.

    Returns
    -------
    ndarray, shape (..., 3, 3)
        Orthonormal matrices with determinant +1; columns are the
        orthonormalized input vectors plus their cross product.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != 6:
        raise ValueError(f"expected (..., 6) features, got shape {f.shape}")
    a1 = f[..., 0:3]
    a2 = f[..., 3:6]

    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if clamp:
        n1 = np.maximum(n1, DEGENERATE_NORM_EPS)
    elif np.any(n1 <= DEGENERATE_NORM_EPS):
        raise DegenerateRotationError("first 6D vector has near-zero norm")
    b1 = a1 / n1

    proj = np.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if clamp:
        # Jitter the residual so the second axis is well-defined even when the
        # network emits (anti)parallel vectors mid-training.
        bad = n2 <= DEGENERATE_NORM_EPS
        if np.any(bad):
            u2 = np.where(bad, u2 + DEGENERATE_NORM_EPS * _orthogonal_fallback(b1), u2)
            n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    elif np.any(n2 <= DEGENERATE_NORM_EPS):
        raise DegenerateRotationError("6D vectors are parallel or second vector is zero")
    b2 = u2 / n2

    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def _orthogonal_fallback(b1):
    # Any direction not parallel to b1; pick the least-aligned coordinate axis.
    axis = np.argmin(np.abs(b1), axis=-1)
    fallback = np.zeros_like(b1)
    np.put_along_axis(fallback, axis[..., None], 1.0, axis=-1)
    return fallback


def matrix_to_sixd(rot, atol=1e-6):
    """Encode rotation matrices as 6D features (first two columns).

    Raises ``ValueError`` if the input is not orthonormal with determinant +1
    within ``atol``.
    """
    r = np.asarray(rot, dtype=np.float64)
    if r.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) matrices, got shape {r.shape}")
    eye = np.eye(3)
    gram_err = np.abs(np.swapaxes(r, -1, -2) @ r - eye).max()
    if gram_err > atol:
        raise ValueError(f"input is not orthonormal (max |R^T R - I| = {gram_err:.3g})")
    det = np.linalg.det(r)
    if np.any(det < 1.0 - atol):
        raise ValueError("input is not a proper rotation (det != +1)")
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def identity_sixd(shape=()):
    """6D features of the identity rotation, tiled to ``shape + (6,)``."""
    features = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    return np.broadcast_to(features, tuple(shape) + (6,)).copy()


def random_rotation(rng, shape=()):
    """Uniformly random rotation matrices via normalized axis-angle sampling."""
    shape = tuple(shape)
    axis = rng.standard_normal(shape + (3,))
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = rng.uniform(0.0, np.pi, shape)
    return axis_angle_to_matrix(axis, angle)


def axis_angle_to_matrix(axis, angle):
    """Rodrigues' formula; ``axis`` is (..., 3) unit vectors, ``angle`` radians."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    eye = np.broadcast_to(np.eye(3), k.shape)
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return eye + s * k + (1.0 - c) * (k @ k)
