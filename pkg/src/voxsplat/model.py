"""The assembled scene model: anchors + generation heads + deformation field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet, GaussianHeads, cull_visible, spawn_batch, voxelize
from .core_math import covariance_vjp
from .hexplane import DeformationDecoders, GaussianBatch, HexPlaneField, deform_gaussians
from .losses import volume_regularization
from .renderer import Camera, RenderOutput, Splats, project_gaussians, rasterize, rasterize_backward


@dataclass
class NeuralVoxelModel:
    anchors: AnchorSet
    heads: GaussianHeads
    field: HexPlaneField
    decoders: DeformationDecoders
    voxel_size: float
    reference_center: np.ndarray
    background: np.ndarray

    @classmethod
    def initialize(cls, points, bbox_min, bbox_max, voxel_size: float, rng: np.random.Generator,
                   reference_center=(0.0, 0.0, -3.0), background=(0.0, 0.0, 0.0), k: int = 10,
                   feature_dim: int = 32, field_resolution=(64, 64, 64, 25), field_multipliers=(1, 2),
                   field_features: int = 16, decoder_hidden: int = 64, offset_init: float = 0.5):
        centers = voxelize(points, voxel_size)
        anchors = AnchorSet.from_centers(centers, voxel_size, rng, k=k, feature_dim=feature_dim,
                                         offset_init=offset_init)
        heads = GaussianHeads.create(rng, k=k, feature_dim=feature_dim)
        field = HexPlaneField.create(bbox_min, bbox_max, field_resolution, field_multipliers,
                                     field_features, rng)
        decoders = DeformationDecoders.create(field.output_dim, rng, hidden=decoder_hidden)
        return cls(anchors, heads, field, decoders, float(voxel_size),
                   np.asarray(reference_center, dtype=np.float64), np.asarray(background, dtype=np.float64))

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.anchors.named_parameters())
        out.update(self.heads.named_parameters())
        out.update(self.field.named_parameters())
        out.update(self.decoders.named_parameters())
        return out

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def generate(self, camera: Camera, t: float, deform: bool = True, cull: bool = True):
        """Spawn (and optionally deform) Gaussians for a view. Returns (gaussians, visible, backward)."""
        if cull:
            vis = cull_visible(self.anchors, camera)
        else:
            vis = np.arange(len(self.anchors))
        g0, spawn_back = spawn_batch(self.anchors, vis, self.heads, camera.center)
        if deform and len(g0):
            g1, def_back = deform_gaussians(g0, self.field, self.decoders, t)
        else:
            g1, def_back = g0, None

        def backward(g: GaussianBatch):
            grads = {}
            if def_back is not None:
                dgrads, g = def_back(g)
                grads.update(dgrads)
            sg = spawn_back(g)
            sg["anchor.log_scales"] = sg.pop("anchor.scale") * self.anchors.scales
            grads.update(sg)
            return grads

        return g1, vis, backward

    def gaussians_at(self, t: float, view_center=None) -> GaussianBatch:
        """All Gaussians (no culling) deformed to time ``t``, viewed from ``view_center``."""
        center = self.reference_center if view_center is None else np.asarray(view_center, dtype=np.float64)
        g, _ = spawn_batch(self.anchors, np.arange(len(self.anchors)), self.heads, center)
        if len(g):
            g, _ = deform_gaussians(g, self.field, self.decoders, t)
        return g

    def render(self, camera: Camera, t: float | None = None, deform: bool = True):
        """Forward render. Returns ``(output, context)``; pass ``context`` to :meth:`backward`."""
        t = camera.timestamp if t is None else t
        gauss, vis, gen_back = self.generate(camera, t, deform)
        h, w = camera.height, camera.width
        if len(gauss) == 0:
            out = rasterize(Splats.empty(), h, w, self.background)
            return out, None
        sigma, cov_back = covariance_vjp(gauss.scale, gauss.rotation)
        means, covs, depths, keep, proj_back = project_gaussians(gauss.mu, sigma, camera)
        src = np.nonzero(keep)[0]
        splats = Splats(means, covs, depths, gauss.color[keep], gauss.opacity[keep], src)
        out = rasterize(splats, h, w, self.background)
        ctx = dict(gauss=gauss, vis=vis, gen_back=gen_back, cov_back=cov_back, proj_back=proj_back,
                   keep=keep, out=out, camera=camera)
        return out, ctx

    def backward(self, ctx, grad_image: np.ndarray, vol_weight: float = 0.0):
        """Gradients of ``sum(grad_image * image) + vol_weight * L_vol`` for every parameter.

        Also returns per-Gaussian 2D position-gradient norms in NDC units and the
        visible-anchor index list, which feed density control and crude-view detection.
        """
        if ctx is None:
            return {}, np.zeros(0), np.zeros(0, dtype=np.int64)
        gauss, keep, cam = ctx["gauss"], ctx["keep"], ctx["camera"]
        n = len(gauss)
        gr = rasterize_backward(ctx["out"], grad_image)
        g_mu, g_sigma = ctx["proj_back"](gr["means"], gr["covs"])
        g_s, g_q = ctx["cov_back"](g_sigma)
        if vol_weight:
            _, vg = volume_regularization(gauss.scale)
            g_s = g_s + vol_weight * vg
        g_color = np.zeros((n, 3))
        g_color[keep] = gr["colors"]
        g_opac = np.zeros(n)
        g_opac[keep] = gr["opacities"]
        grads = ctx["gen_back"](GaussianBatch(g_mu, g_q, g_s, g_color, g_opac))
        ndc = np.zeros((n, 2))
        ndc[keep] = gr["means"] * np.array([cam.width / 2.0, cam.height / 2.0])
        return grads, np.linalg.norm(ndc, axis=1), ctx["vis"]
