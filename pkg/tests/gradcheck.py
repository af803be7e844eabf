"""Central finite-difference checks shared by the unit tests and the acceptance suite.

Each ``case_*`` builds a random problem from a seed, evaluates the analytic
gradient of a scalar ``sum(G * output)`` and compares it with central
differences along random directions (one per parameter block and one across
all blocks). The returned value is the worst relative error
``|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)``.
"""

import numpy as np

from voxsplat.anchors import Anchor, GaussianHeads, spawn_gaussians
from voxsplat.core_math import Mlp, covariance_vjp, mlp_forward_backward
from voxsplat.hexplane import DeformationDecoders, GaussianBatch, HexPlaneField, deform_gaussians, hexplane_query, tv_loss
from voxsplat.losses import color_loss, ssim, volume_regularization
from voxsplat.renderer import Camera, Splats, project_gaussians, rasterize, rasterize_backward

FLOOR = 1e-6
STEP = 1e-6


def directional_error(f, params: dict, grads: dict, rng, h=STEP) -> float:
    """Worst relative error of ``grads`` against central differences of ``f(params)``."""
    names = sorted(params)
    dirs = []
    for name in names:
        d = {n: np.zeros_like(params[n]) for n in names}
        d[name] = rng.normal(size=params[name].shape)
        dirs.append(d)
    dirs.append({n: rng.normal(size=params[n].shape) for n in names})
    worst = 0.0
    for d in dirs:
        plus = {n: params[n] + h * d[n] for n in names}
        minus = {n: params[n] - h * d[n] for n in names}
        numeric = (f(plus) - f(minus)) / (2 * h)
        analytic = sum(float(np.sum(grads[n] * d[n])) for n in names)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)
        worst = max(worst, err)
    return worst


def randomize_biases(net, rng, scale=0.1):
    """Fresh networks have zero biases, which puts ReLU inputs exactly on the kink
    whenever a whole hidden layer is inactive; trained networks never sit there."""
    for b in net.biases:
        b[...] = rng.normal(scale=scale, size=b.shape)
    return net


def _mlp_params(net, prefix="net"):
    return {f"{prefix}.{i}.{kind}": arr for i, (w, b) in enumerate(zip(net.weights, net.biases))
            for kind, arr in (("weight", w), ("bias", b))}


def _mlp_from(params, prefix, acts):
    n = len(acts)
    return Mlp([params[f"{prefix}.{i}.weight"] for i in range(n)],
               [params[f"{prefix}.{i}.bias"] for i in range(n)], list(acts))


def random_camera(rng, width=16, height=16, target=(0.0, 0.0, 0.0)):
    eye = rng.normal(size=3)
    eye = 3.0 * eye / np.linalg.norm(eye)
    return Camera.look_at(eye, np.asarray(target, dtype=float), width, height, fx=rng.uniform(15, 25))


def case_mlp(seed):
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in rng.integers(2, 9, size=int(rng.integers(2, 5)))]
    net = randomize_biases(Mlp.create(dims, rng), rng)
    x = rng.normal(size=(int(rng.integers(1, 6)), dims[0]))
    G = rng.normal(size=(len(x), dims[-1]))
    y, back = mlp_forward_backward(net, x)
    gx, layers = back(G)
    params = dict(_mlp_params(net), x=x)
    grads = {"x": gx}
    for i, (gw, gb) in enumerate(layers):
        grads[f"net.{i}.weight"], grads[f"net.{i}.bias"] = gw, gb

    def f(p):
        return float(np.sum(G * mlp_forward_backward(_mlp_from(p, "net", net.activations), p["x"])[0]))

    return directional_error(f, params, grads, rng)


def _batch_dot(G: GaussianBatch, out: GaussianBatch) -> float:
    return float(sum(np.sum(getattr(G, a) * getattr(out, a)) for a in ("mu", "rotation", "scale", "color", "opacity")))


def _random_batch_like(rng, out: GaussianBatch) -> GaussianBatch:
    return GaussianBatch(*(rng.normal(size=np.shape(getattr(out, a))) for a in ("mu", "rotation", "scale", "color", "opacity")))


HEADS = ("opacity", "color", "scale", "rotation")


def case_spawn(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 6))
    fdim = int(rng.integers(2, 9))
    heads = GaussianHeads.create(rng, k=k, feature_dim=fdim)
    for h in HEADS:
        randomize_biases(getattr(heads, h), rng)
    anchor = Anchor(rng.normal(scale=0.5, size=3), rng.normal(size=fdim), rng.uniform(0.05, 0.3, 3),
                    rng.uniform(-1, 1, (k, 3)))
    cam = random_camera(rng)
    out, back = spawn_gaussians(anchor, heads, cam)
    G = _random_batch_like(rng, out)
    g = back(G)
    params = {"feature": anchor.feature, "scale": anchor.scale, "offsets": anchor.offsets}
    grads = {"feature": g["anchor.features"][0], "scale": g["anchor.scale"][0], "offsets": g["anchor.offsets"][0]}
    for h in HEADS:
        net = getattr(heads, h)
        for key, arr in _mlp_params(net, f"head.{h}").items():
            params[key], grads[key] = arr, g[key]

    def f(p):
        hs = GaussianHeads(*(_mlp_from(p, f"head.{h}", getattr(heads, h).activations) for h in HEADS), k=k)
        a = Anchor(anchor.center, p["feature"], p["scale"], p["offsets"])
        return _batch_dot(G, spawn_gaussians(a, hs, cam)[0])

    return directional_error(f, params, grads, rng)


def small_field(rng, feature_dim=3):
    res = (int(rng.integers(3, 7)), int(rng.integers(3, 7)), int(rng.integers(3, 7)), int(rng.integers(2, 6)))
    return HexPlaneField.create(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]), res, (1, 2),
                                feature_dim, rng, init_range=1.0)


def _field_with(field, p):
    grids = [{name: p[f"field.{s}.{name}"] for name in planes} for s, planes in enumerate(field.grids)]
    return HexPlaneField(grids, field.bbox_min, field.bbox_max, field.base_resolution, field.multipliers)


def case_hexplane(seed):
    rng = np.random.default_rng(seed)
    field = small_field(rng)
    n = int(rng.integers(1, 8))
    xyz = rng.uniform(-0.95, 0.95, (n, 3))
    t = rng.uniform(0.02, 0.98, n)
    feat, back = hexplane_query(field, xyz, t)
    G = rng.normal(size=feat.shape)
    grid_grads, g_xyz = back(G)
    params = dict(field.named_parameters(), xyz=xyz)
    grads = {k: grid_grads.get(k, np.zeros_like(v)) for k, v in field.named_parameters().items()}
    grads["xyz"] = g_xyz

    def f(p):
        return float(np.sum(G * hexplane_query(_field_with(field, p), p["xyz"], t)[0]))

    return directional_error(f, params, grads, rng)


DECODERS = ("fuse", "position", "rotation", "scale")


def case_deform(seed):
    rng = np.random.default_rng(seed)
    field = small_field(rng)
    dec = DeformationDecoders.create(field.output_dim, rng, hidden=int(rng.integers(4, 12)))
    for name in DECODERS:
        net = randomize_biases(getattr(dec, name), rng)
        if name != "fuse":  # give the zero-initialized heads real weights
            net.weights[-1][...] = rng.normal(scale=0.3, size=net.weights[-1].shape)
    n = int(rng.integers(1, 8))
    q = rng.normal(size=(n, 4))
    g0 = GaussianBatch(rng.uniform(-0.8, 0.8, (n, 3)), q, rng.uniform(0.05, 0.5, (n, 3)),
                       rng.uniform(0, 1, (n, 3)), rng.uniform(0, 1, n))
    t = float(rng.uniform(0.02, 0.98))
    out, back = deform_gaussians(g0, field, dec, t)
    G = _random_batch_like(rng, out)
    pg, ig = back(G)
    params = dict(field.named_parameters(), mu=g0.mu, rotation=g0.rotation, scale=g0.scale)
    grads = {k: pg.get(k, np.zeros_like(v)) for k, v in field.named_parameters().items()}
    grads.update(mu=ig.mu, rotation=ig.rotation, scale=ig.scale)
    for name in DECODERS:
        for key, arr in _mlp_params(getattr(dec, name), f"deform.{name}").items():
            params[key], grads[key] = arr, pg[key]

    def f(p):
        d = DeformationDecoders(*(_mlp_from(p, f"deform.{n}", getattr(dec, n).activations) for n in DECODERS))
        g = GaussianBatch(p["mu"], p["rotation"], p["scale"], g0.color, g0.opacity)
        return _batch_dot(G, deform_gaussians(g, _field_with(field, p), d, t)[0])

    return directional_error(f, params, grads, rng)


def case_tv(seed):
    rng = np.random.default_rng(seed)
    field = small_field(rng)
    w = float(rng.uniform(0.5, 2.0))
    _, back = tv_loss(field)
    params = field.named_parameters()
    return directional_error(lambda p: w * tv_loss(_field_with(field, p))[0], params, back(w), rng)


def case_projection(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    n = int(rng.integers(1, 6))
    mu = rng.normal(scale=0.5, size=(n, 3))
    A = rng.normal(scale=0.2, size=(n, 3, 3))
    sigma = A @ A.transpose(0, 2, 1) + 0.01 * np.eye(3)
    means, covs, depths, keep, back = project_gaussians(mu, sigma, cam)
    Gm, Gc = rng.normal(size=means.shape), rng.normal(size=covs.shape)
    g_mu, g_sigma = back(Gm, Gc)

    def f(p):
        m, c, *_ = project_gaussians(p["mu"], p["sigma"], cam)
        return float(np.sum(Gm * m) + np.sum(Gc * c))

    return directional_error(f, {"mu": mu, "sigma": sigma}, {"mu": g_mu, "sigma": g_sigma}, rng)


def random_splats(rng, n, size):
    means = rng.uniform(-3, size + 3, (n, 2))
    A = rng.normal(0, 1.5, (n, 2, 2))
    covs = A @ A.transpose(0, 2, 1) + 0.3 * np.eye(2)
    return Splats(means, covs, rng.uniform(1, 5, n), rng.uniform(0, 1, (n, 3)), rng.uniform(0.05, 1, n),
                  np.arange(n))


def case_rasterizer(seed, size=16):
    rng = np.random.default_rng(seed)
    sp = random_splats(rng, int(rng.integers(1, 17)), size)
    bg = rng.uniform(0, 1, 3)
    G = rng.normal(size=(size, size, 3))
    grads = rasterize_backward(rasterize(sp, size, size, bg), G)
    names = ("means", "covs", "colors", "opacities")

    def f(p):
        s = Splats(p["means"], p["covs"], sp.depths, p["colors"], p["opacities"], sp.source)
        return float(np.sum(G * rasterize(s, size, size, bg).image))

    return directional_error(f, {n: getattr(sp, n) for n in names}, grads, rng)


def case_volume(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.01, 2.0, (int(rng.integers(1, 50)), 3))
    _, g = volume_regularization(s)
    return directional_error(lambda p: volume_regularization(p["s"])[0], {"s": s}, {"s": g}, rng)


def case_color_loss(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(11, 20)), int(rng.integers(11, 20))
    target = rng.uniform(0, 1, (h, w, 3))
    img = np.clip(target + rng.normal(scale=0.2, size=target.shape), 0, 1)
    lam = float(rng.uniform(0, 1))
    _, g, _ = color_loss(img, target, lam)
    return directional_error(lambda p: color_loss(p["img"], target, lam)[0], {"img": img}, {"img": g}, rng)


def case_ssim(seed):
    rng = np.random.default_rng(seed)
    target = rng.uniform(0, 1, (14, 15, 3))
    img = np.clip(target + rng.normal(scale=0.2, size=target.shape), 0, 1)
    _, g = ssim(img, target, with_grad=True)
    return directional_error(lambda p: ssim(p["img"], target), {"img": img}, {"img": g}, rng)


def case_covariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    s, q = rng.uniform(0.05, 2, (n, 3)), rng.normal(size=(n, 4))
    sigma, back = covariance_vjp(s, q)
    G = rng.normal(size=sigma.shape)
    gs, gq = back(G)

    def f(p):
        return float(np.sum(G * covariance_vjp(p["s"], p["q"])[0]))

    return directional_error(f, {"s": s, "q": q}, {"s": gs, "q": gq}, rng)


# name -> (case, tolerance)
CASES = {
    "mlp": (case_mlp, 1e-4),
    "spawn_gaussians": (case_spawn, 1e-4),
    "hexplane_query": (case_hexplane, 1e-4),
    "deform_gaussians": (case_deform, 1e-4),
    "tv_loss": (case_tv, 1e-4),
    "project_gaussian": (case_projection, 1e-4),
    "rasterize_backward": (case_rasterizer, 1e-3),
    "volume_regularization": (case_volume, 1e-4),
    "color_loss": (case_color_loss, 1e-4),
}
