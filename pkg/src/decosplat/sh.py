"""Real spherical harmonics up to degree 3 for view-dependent color."""

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

MAX_DEGREE = 3


def sh_basis(dirs, degree):
    """Basis values (N, (degree+1)^2) at unit directions (N, 3)."""
    if degree > MAX_DEGREE:
        raise ValueError(f"SH degree {degree} > {MAX_DEGREE}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy),
                C2[3] * x * z, C2[4] * (xx - yy)]
    if degree >= 3:
        out += [C3[0] * y * (3 * xx - yy), C3[1] * x * y * z,
                C3[2] * y * (4 * zz - xx - yy), C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                C3[4] * x * (4 * zz - xx - yy), C3[5] * z * (xx - yy),
                C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs, degree):
    """Gradient of each basis polynomial w.r.t. (x, y, z): shape (N, K, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        rows += [(zero, zero - C1, zero), (zero, zero, zero + C1), (zero - C1, zero, zero)]
    if degree >= 2:
        rows += [(C2[0] * y, C2[0] * x, zero),
                 (zero, C2[1] * z, C2[1] * y),
                 (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
                 (C2[3] * z, zero, C2[3] * x),
                 (2 * C2[4] * x, -2 * C2[4] * y, zero)]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [(C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy), zero),
                 (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
                 (C3[2] * -2 * x * y, C3[2] * (4 * zz - xx - 3 * yy), C3[2] * 8 * y * z),
                 (C3[3] * -6 * x * z, C3[3] * -6 * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
                 (C3[4] * (4 * zz - 3 * xx - yy), C3[4] * -2 * x * y, C3[4] * 8 * x * z),
                 (C3[5] * 2 * x * z, C3[5] * -2 * y * z, C3[5] * (xx - yy)),
                 (C3[6] * (3 * xx - 3 * yy), C3[6] * -6 * x * y, zero)]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def evaluate_sh(sh, view_dir):
    """Color from coefficients ``sh`` (..., K, 3) along unit ``view_dir`` (..., 3).

    No offset and no clamping; clamping happens at image write-out.
    """
    sh = np.asarray(sh, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[-2]))) - 1
    basis = sh_basis(view_dir, degree)
    return np.einsum("...k,...kc->...c", basis, sh)


def view_dirs(mu, cam_center):
    d = np.asarray(mu, dtype=np.float64) - cam_center
    r = np.linalg.norm(d, axis=-1, keepdims=True)
    return d / r, r


def sh_vjp(sh, dirs, dist, d_color):
    """Gradients of color = SH(dirs) w.r.t. the coefficients and the Gaussian position.

    ``dirs`` are unit vectors from the camera centre and ``dist`` their original lengths.
    """
    degree = int(round(np.sqrt(sh.shape[-2]))) - 1
    basis = sh_basis(dirs, degree)
    d_sh = basis[..., :, None] * d_color[..., None, :]
    if degree == 0:
        return d_sh, np.zeros(dirs.shape)
    # dL/dY_k = sh_k . d_color
    d_basis = np.einsum("nkc,nc->nk", sh, d_color)
    d_dir = np.einsum("nk,nkj->nj", d_basis, sh_basis_grad(dirs, degree))
    # through normalisation d = v / |v|
    d_mu = (d_dir - dirs * np.sum(d_dir * dirs, axis=-1, keepdims=True)) / dist
    return d_sh, d_mu
