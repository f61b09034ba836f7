"""Differentiable forward rendering and its exact backward pass.

Forward: visible anchors are fused, decoded, activation-filtered (slots with
non-positive raw opacity never reach compositing), projected to 2D splats,
depth-sorted globally, and alpha-composited front to back:

    C(u) = sum_n c_n ahat_n(u) prod_{j<n} (1 - ahat_j(u)) + T_final * bg
    ahat_n(u) = min(0.99, alpha_n * exp(-0.5 d' Sigma'^-1 d)),  d = u - mean2d

Terms with ahat < 1/255 are skipped and accumulation stops once the
transmittance falls below 1e-4; both shortcuts can be disabled through
RenderOptions for oracle comparisons. The RenderGraph retains everything the
backward pass needs; render_backward replays the composite in reverse order
and chains gradients through the projection, the decoder, and the feature
fusion down to every learnable tensor. Capped and skipped terms receive
exactly zero gradient, as do inactive slots.
"""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from . import geom
from .decoder import MlpWeights, decode_anchors, decode_backward
from .errors import InternalError, MissingForwardState
from .scaffold import visible_anchors
from .temporal import encode_time, reduce_periods, reduce_periods_many

ALPHA_CAP = 0.99
ALPHA_SKIP = 1.0 / 255.0
STOP_TRANSMITTANCE = 1e-4
# 99%-mass radius of a 2D Gaussian: chi-square quantile, 2 dof.
MASS_RADIUS_SQ = 9.210340371976184
# With thresholds disabled the footprint is widened until the dropped tail
# is below this value, so naive no-culling oracles agree to ~1e-8 per term.
TAIL_EPS = 1e-8


class RenderOptions:
    """Rasterizer switches; defaults match the production path."""

    def __init__(self, use_thresholds=True, deterministic=True):
        self.use_thresholds = use_thresholds
        self.deterministic = deterministic


DEFAULT_OPTIONS = RenderOptions()


def _footprint_radius_sq(opacity, use_thresholds):
    """Squared Mahalanobis radius beyond which a splat cannot contribute."""
    if use_thresholds:
        r2 = 2.0 * np.log(np.maximum(opacity, ALPHA_SKIP) / ALPHA_SKIP)
        return np.maximum(r2, MASS_RADIUS_SQ)
    return 2.0 * np.log(np.maximum(opacity, TAIL_EPS) / TAIL_EPS)


def _project_and_cull(camera, means, quats, scales, opacity, colors, rows, slots, options):
    """Shared projection + culling for flattened Gaussian arrays.

    rows/slots identify each entry's source (anchor row, offset slot).
    Returns splat arrays sorted by (depth, row, slot), plus the saved
    projection state for the backward pass.
    """
    # Drop entries that cannot contribute at all.
    if options.use_thresholds:
        keep = opacity > ALPHA_SKIP
    else:
        keep = opacity > TAIL_EPS
    means, quats, scales = means[keep], quats[keep], scales[keep]
    opacity, colors, rows, slots = opacity[keep], colors[keep], rows[keep], slots[keep]

    if means.shape[0]:
        R_cam = camera.rotation_matrix()
        z = means @ R_cam[2] + camera.translation[2]
        front = z > geom.NEAR_PLANE
        means, quats, scales = means[front], quats[front], scales[front]
        opacity, colors, rows, slots = opacity[front], colors[front], rows[front], slots[front]

    if means.shape[0] == 0:
        return _empty_splats(), None

    proj = geom.project_splats(camera, means, quats, scales)
    a, b, c = proj.cov[:, 0], proj.cov[:, 1], proj.cov[:, 2]
    det = a * c - b * b
    if np.any(det <= 0):
        raise InternalError("projected covariance is not positive definite")

    r2 = _footprint_radius_sq(opacity, options.use_thresholds)
    rx = np.sqrt(r2 * a)
    ry = np.sqrt(r2 * c)
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    x0 = np.maximum(np.ceil(mx - rx - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.floor(mx + rx - 0.5), camera.width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(my - ry - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.floor(my + ry - 0.5), camera.height - 1).astype(np.int64)
    on_image = (x0 <= x1) & (y0 <= y1)
    if not on_image.any():
        return _empty_splats(), None

    order = np.nonzero(on_image)[0][
        np.lexsort((slots[on_image], rows[on_image], proj.depth[on_image]))
    ]
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    splats = SimpleNamespace(
        mean2d=proj.mean2d[order],
        cov=proj.cov[order],
        conic=conic[order],
        depth=proj.depth[order],
        opacity=opacity[order],
        color=colors[order],
        bbox=np.stack([x0, x1, y0, y1], axis=1)[order],
        rows=rows[order],
        slots=slots[order],
        # Indices into the pre-sort, pre-bbox-cull projection arrays.
        proj_index=order,
    )
    return splats, proj


def _empty_splats():
    return SimpleNamespace(
        mean2d=np.zeros((0, 2)), cov=np.zeros((0, 3)), conic=np.zeros((0, 3)),
        depth=np.zeros(0), opacity=np.zeros(0), color=np.zeros((0, 3)),
        bbox=np.zeros((0, 4), dtype=np.int64),
        rows=np.zeros(0, dtype=np.int64), slots=np.zeros(0, dtype=np.int64),
        proj_index=np.zeros(0, dtype=np.int64),
    )


def _splat_alpha(splats, n, xs_half, ys_half):
    """Recompute one splat's (ahat, uncapped alpha*G, G) over its bbox."""
    x0, x1, y0, y1 = splats.bbox[n]
    dx = xs_half[x0:x1 + 1] - splats.mean2d[n, 0]
    dy = ys_half[y0:y1 + 1] - splats.mean2d[n, 1]
    A, B, C = splats.conic[n]
    power = -0.5 * (A * dx[None, :] ** 2 + C * dy[:, None] ** 2) - B * dy[:, None] * dx[None, :]
    G = np.exp(power)
    alpha_full = splats.opacity[n] * G
    return np.minimum(alpha_full, ALPHA_CAP), alpha_full, G, dx, dy


def _composite_forward(splats, camera, background, options):
    H, W = camera.height, camera.width
    M = splats.mean2d.shape[0]
    acc = np.zeros((H, W, 3), dtype=np.float64)
    trans = np.ones((H, W), dtype=np.float64)
    stop = np.full((H, W), M, dtype=np.int64)
    xs_half = np.arange(W, dtype=np.float64) + 0.5
    ys_half = np.arange(H, dtype=np.float64) + 0.5

    for n in range(M):
        x0, x1, y0, y1 = splats.bbox[n]
        sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        ahat, _, _, _, _ = _splat_alpha(splats, n, xs_half, ys_half)
        t_sub = trans[sl]
        stop_sub = stop[sl]
        if options.use_thresholds:
            stop_sub[(stop_sub == M) & (t_sub < STOP_TRANSMITTANCE)] = n
            mask = (stop_sub > n) & (ahat >= ALPHA_SKIP)
        else:
            mask = np.ones_like(ahat, dtype=bool)
        if not mask.any():
            continue
        weight = np.where(mask, ahat * t_sub, 0.0)
        acc[sl] += weight[:, :, None] * splats.color[n]
        trans[sl] = np.where(mask, t_sub * (1.0 - ahat), t_sub)

    image = acc + trans[:, :, None] * background
    return image, trans, stop


def _composite_backward(splats, camera, background, options, final_trans, stop, grad_image):
    H, W = camera.height, camera.width
    M = splats.mean2d.shape[0]
    xs_half = np.arange(W, dtype=np.float64) + 0.5
    ys_half = np.arange(H, dtype=np.float64) + 0.5

    t_run = final_trans.copy()
    suffix = final_trans[:, :, None] * np.asarray(background, dtype=np.float64)
    g_mean2d = np.zeros((M, 2), dtype=np.float64)
    g_cov = np.zeros((M, 3), dtype=np.float64)
    g_opacity = np.zeros(M, dtype=np.float64)
    g_color = np.zeros((M, 3), dtype=np.float64)

    for n in range(M - 1, -1, -1):
        x0, x1, y0, y1 = splats.bbox[n]
        sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        ahat, alpha_full, G, dx, dy = _splat_alpha(splats, n, xs_half, ys_half)
        if options.use_thresholds:
            mask = (stop[sl] > n) & (ahat >= ALPHA_SKIP)
        else:
            mask = np.ones_like(ahat, dtype=bool)
        if not mask.any():
            continue

        one_minus = 1.0 - ahat
        t_sub = t_run[sl]
        t_before = np.where(mask, t_sub / one_minus, t_sub)
        gI = grad_image[sl]
        weight = np.where(mask, ahat * t_before, 0.0)
        g_color[n] = np.einsum("hw,hwc->c", weight, gI)

        g_dot_c = gI @ splats.color[n]
        g_dot_s = np.einsum("hwc,hwc->hw", gI, suffix[sl])
        g_ahat = np.where(mask, g_dot_c * t_before - g_dot_s / one_minus, 0.0)
        # The cap is flat: capped terms get zero gradient.
        g_alpha_full = np.where(alpha_full > ALPHA_CAP, 0.0, g_ahat)
        g_opacity[n] = np.sum(g_alpha_full * G)
        gP = g_alpha_full * alpha_full  # dG/dP = G and alpha_full = opacity * G

        A, B, C = splats.conic[n]
        adx_bdy = A * dx[None, :] + B * dy[:, None]
        bdx_cdy = B * dx[None, :] + C * dy[:, None]
        g_mean2d[n, 0] = np.sum(gP * adx_bdy)
        g_mean2d[n, 1] = np.sum(gP * bdx_cdy)
        gA = np.sum(gP * (-0.5 * dx[None, :] ** 2))
        gB = np.sum(gP * (-(dx[None, :] * dy[:, None])))
        gC = np.sum(gP * (-0.5 * dy[:, None] ** 2))
        # Conic is the inverse of the (dilated) covariance: dN = -N dM N.
        g_cov[n, 0] = -(gA * A * A + gB * A * B + gC * B * B)
        g_cov[n, 1] = -(2 * gA * A * B + gB * (A * C + B * B) + 2 * gC * B * C)
        g_cov[n, 2] = -(gA * B * B + gB * B * C + gC * C * C)

        suffix[sl] = np.where(mask[:, :, None], suffix[sl] + weight[:, :, None] * splats.color[n], suffix[sl])
        t_run[sl] = t_before

    return g_mean2d, g_cov, g_opacity, g_color


def composite_pixel(splats, u, background, options=DEFAULT_OPTIONS):
    """Reference per-pixel compositor over depth-sorted Splat2D objects.

    Walks the terms front to back at the continuous image point u, applying
    the same cap/skip/stop rules as the image renderer. Used as the
    single-pixel contract; the batched renderer must agree with it.
    """
    u = np.asarray(u, dtype=np.float64)
    color = np.zeros(3, dtype=np.float64)
    trans = 1.0
    for s in splats:
        if options.use_thresholds and trans < STOP_TRANSMITTANCE:
            break
        a, b, c = s.cov2d
        det = a * c - b * b
        d = u - s.mean2d
        power = -0.5 * (c * d[0] ** 2 - 2 * b * d[0] * d[1] + a * d[1] ** 2) / det
        ahat = min(s.opacity * np.exp(power), ALPHA_CAP)
        if options.use_thresholds and ahat < ALPHA_SKIP:
            continue
        color = color + s.color * (ahat * trans)
        trans *= 1.0 - ahat
    return color + trans * np.asarray(background, dtype=np.float64)


def cull_and_activate(clusters, camera, options=DEFAULT_OPTIONS):
    """Activation filter + projection for a list of DecodedCluster.

    Slots with raw opacity <= 0 are dropped; survivors are projected and
    splats whose contributing footprint misses the image are dropped.
    Returns Splat2D objects in (cluster, slot) order.
    """
    means, quats, scales, opacity, colors, rows, slots = [], [], [], [], [], [], []
    for i, cl in enumerate(clusters):
        for k in np.nonzero(cl.active)[0]:
            means.append(cl.means[k])
            quats.append(cl.rotations[k])
            scales.append(cl.scales[k])
            opacity.append(cl.raw_opacity[k])
            colors.append(cl.colors[k])
            rows.append(i)
            slots.append(int(k))
    if not means:
        return []
    splats, _ = _project_and_cull(
        camera,
        np.asarray(means), np.asarray(quats), np.asarray(scales),
        np.asarray(opacity), np.asarray(colors),
        np.asarray(rows, dtype=np.int64), np.asarray(slots, dtype=np.int64),
        options,
    )
    out = [
        geom.Splat2D(
            mean2d=splats.mean2d[n], cov2d=tuple(splats.cov[n]), depth=float(splats.depth[n]),
            opacity=float(splats.opacity[n]), color=splats.color[n],
            source=(int(splats.rows[n]), int(splats.slots[n])),
        )
        for n in range(splats.mean2d.shape[0])
    ]
    out.sort(key=lambda s: s.source)
    return out


def render_gaussians(gaussians, camera, background=(0.0, 0.0, 0.0), options=DEFAULT_OPTIONS):
    """Render a plain list of Gaussian3D (no scaffold, no decoder).

    Used by the synthetic-scene generator and by oracle tests; shares the
    projection, culling, and compositing code with the full pipeline.
    """
    m = len(gaussians)
    background = np.asarray(background, dtype=np.float64)
    if m == 0:
        H, W = camera.height, camera.width
        return np.broadcast_to(background, (H, W, 3)).copy()
    splats, _ = _project_and_cull(
        camera,
        np.stack([g.mean for g in gaussians]),
        np.stack([geom.quat_normalize(g.rotation) for g in gaussians]),
        np.stack([g.scale for g in gaussians]),
        np.array([g.opacity for g in gaussians], dtype=np.float64),
        np.stack([g.color for g in gaussians]),
        np.arange(m, dtype=np.int64), np.zeros(m, dtype=np.int64),
        options,
    )
    image, _, _ = _composite_forward(splats, camera, background, options)
    return image


def render(scaffold, camera, t, weights, global_rows, background=(0.0, 0.0, 0.0),
           options=DEFAULT_OPTIONS, ablate=(False, False, False)):
    """Full forward render of the scaffold at timestamp t.

    ablate = (base, var, global) zeroes the matching feature component
    before fusion without touching any parameter shapes. Returns a
    RenderGraph retaining every intermediate the backward pass needs.
    """
    background = np.asarray(background, dtype=np.float64)
    e = encode_time(t, scaffold.T)
    vis = visible_anchors(scaffold, camera)
    V = vis.shape[0]
    d_b, d_v = scaffold.d_b, scaffold.d_v
    d_g = global_rows.shape[1]

    base = np.zeros((V, d_b)) if ablate[0] else np.asarray(scaffold.f_base[vis], dtype=np.float64)
    local = np.zeros((V, d_v)) if ablate[1] else reduce_periods_many(
        np.asarray(scaffold.f_var[vis], dtype=np.float64), e)
    if ablate[2]:
        glob = np.zeros(d_g)
    else:
        glob = reduce_periods(np.asarray(global_rows, dtype=np.float64), e)
    h = np.concatenate([base, local, np.broadcast_to(glob, (V, d_g))], axis=1)

    batch, dstate = decode_anchors(
        scaffold.positions[vis],
        np.asarray(scaffold.offsets[vis], dtype=np.float64),
        np.asarray(scaffold.offset_scale[vis], dtype=np.float64),
        np.asarray(scaffold.shape_scale[vis], dtype=np.float64),
        h, camera, weights)

    K = scaffold.K
    act_rows, act_slots = np.nonzero(batch.active)
    splats, proj = _project_and_cull(
        camera,
        batch.means[act_rows, act_slots],
        batch.rotations[act_rows, act_slots],
        batch.scales[act_rows, act_slots],
        batch.raw_opacity[act_rows, act_slots],
        batch.colors[act_rows, act_slots],
        act_rows.astype(np.int64), act_slots.astype(np.int64),
        options,
    )
    image, trans, stop = _composite_forward(splats, camera, background, options)

    max_opacity = np.maximum(batch.raw_opacity, 0.0).max(axis=1) if V else np.zeros(0)
    return SimpleNamespace(
        image=image, background=background, camera=camera, t=float(t), encoding=e,
        options=options, ablate=tuple(ablate),
        visible=vis, n_anchors=len(scaffold),
        d_b=d_b, d_v=d_v, d_g=d_g, K=K, T=scaffold.T,
        h=h, decode_state=dstate, batch=batch, proj=proj,
        weights_ref=weights,
        splats=splats,
        splat_anchors=vis[splats.rows] if V else splats.rows,
        splat_slots=splats.slots,
        final_trans=trans, stop=stop,
        max_opacity=max_opacity,
    )


def render_backward(graph, grad_image):
    """Exact adjoint of render: image gradient -> every learnable tensor.

    Returns a namespace with full-size gradient arrays (zeros for anchors
    that were not visible), the decoder weight gradients, and the per-splat
    2D positional gradients used by the densification statistics.
    """
    if graph.decode_state is None and graph.visible.size:
        raise MissingForwardState("render graph is missing its decode state")
    splats = graph.splats
    g_mean2d, g_cov, g_opacity_s, g_color_s = _composite_backward(
        splats, graph.camera, graph.background, graph.options,
        graph.final_trans, graph.stop, grad_image)

    V = graph.visible.shape[0]
    K = graph.K
    g_means_g = np.zeros((V, K, 3))
    g_quats_g = np.zeros((V, K, 4))
    g_scales_g = np.zeros((V, K, 3))
    g_opac_g = np.zeros((V, K))
    g_color_g = np.zeros((V, K, 3))

    M = splats.mean2d.shape[0]
    if M:
        # Chain through the projection only for splats that were rasterized.
        sub = SimpleNamespace(**{
            key: getattr(graph.proj, key)[splats.proj_index]
            for key in ("view", "mean2d", "depth", "cov", "quats", "scales", "Rq", "Mm",
                        "t0", "t1", "v0", "v1", "txz", "tyz", "ctx", "cty", "tx", "ty",
                        "inv_z", "inv_z2", "j00", "j02", "j11", "j12")
        })
        sub.R_cam = graph.proj.R_cam
        sub.limx, sub.limy = graph.proj.limx, graph.proj.limy
        g_means_w, g_quats_w, g_scales_w = geom.project_splats_backward(
            graph.camera, sub, g_mean2d, g_cov)
        r, s = splats.rows, splats.slots
        g_means_g[r, s] = g_means_w
        g_quats_g[r, s] = g_quats_w
        g_scales_g[r, s] = g_scales_w
        g_opac_g[r, s] = g_opacity_s
        g_color_g[r, s] = g_color_s

    dg = decode_backward(graph.decode_state, graph.weights_ref, g_means_g, g_quats_g,
                         g_scales_g, g_opac_g, g_color_g) if V else None

    n = graph.n_anchors
    T = graph.T
    w = graph.weights_ref

    def zero_like_head(head):
        return MlpWeights(*[np.zeros_like(np.asarray(a, dtype=np.float64)) for a in head.arrays()])

    out = SimpleNamespace(
        f_base=np.zeros((n, graph.d_b)),
        f_var=np.zeros((n, T, graph.d_v)),
        offsets=np.zeros((n, K, 3)),
        offset_scale=np.zeros((n, 3)),
        shape_scale=np.zeros((n, 3)),
        g=np.zeros((T, graph.d_g)),
        opacity_mlp=zero_like_head(w.opacity),
        color_mlp=zero_like_head(w.color),
        covariance_mlp=zero_like_head(w.covariance),
        splat_mean2d=g_mean2d,
    )
    if V:
        vis = graph.visible
        e = graph.encoding
        gh = dg.h
        if not graph.ablate[0]:
            out.f_base[vis] = gh[:, :graph.d_b]
        if not graph.ablate[1]:
            mid = gh[:, graph.d_b:graph.d_b + graph.d_v]
            out.f_var[vis] = np.einsum("t,vd->vtd", e.weights, mid)
        if not graph.ablate[2]:
            tail = gh[:, graph.d_b + graph.d_v:]
            out.g = e.weights[:, None] * tail.sum(axis=0)[None, :]
        out.offsets[vis] = dg.offsets
        out.offset_scale[vis] = dg.offset_scale
        out.shape_scale[vis] = dg.shape_scale
        out.opacity_mlp = dg.opacity
        out.color_mlp = dg.color
        out.covariance_mlp = dg.covariance
    return out
