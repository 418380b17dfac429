"""Backbone export: batchnorm absorption, fc conversion, weight rescaling.

Turns a trained trunk (base + bottleneck) into a standalone backbone with
plain conv / pool / dense layers: eval-mode batchnorm statistics are folded
into the preceding layer, the fully-convolutional bottleneck layers become
dense layers anchored at the training resolution, and per-layer activation
variances can be normalized to 1 on a calibration set with compensating
scales pushed into the following layer.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .arch import CONV, POOL
from .network import MultiTaskModel


def absorb_batchnorm(model: MultiTaskModel) -> MultiTaskModel:
    """Fold eval-mode batchnorm into the preceding conv/deconv, everywhere.

    For a parametric layer with weight w, bias b followed by BN(gamma, beta,
    mu, var, eps): w' = w * gamma / sqrt(var + eps), b' = (b - mu) * that
    factor + beta. Outputs equal the original eval-mode outputs.
    """
    model = copy.deepcopy(model)
    model.eval()
    for name, block in _all_blocks(model):
        if isinstance(block.bn, nn.Identity):
            continue
        if not isinstance(block.op, (nn.Conv2d, nn.ConvTranspose2d)):
            raise ValueError(
                f"{name}: batchnorm not preceded by a parametric layer")
        bn = block.bn
        factor = bn.weight / torch.sqrt(bn.running_var + bn.eps)
        with torch.no_grad():
            if isinstance(block.op, nn.Conv2d):
                block.op.weight.mul_(factor.view(-1, 1, 1, 1))
            else:  # ConvTranspose2d weight is (in, out, kh, kw)
                block.op.weight.mul_(factor.view(1, -1, 1, 1))
            old_bias = block.op.bias
            bias = torch.zeros_like(bn.bias) if old_bias is None else old_bias.detach()
            new_bias = (bias - bn.running_mean) * factor + bn.bias
            if old_bias is None:
                block.op.bias = nn.Parameter(new_bias)
            else:
                block.op.bias.copy_(new_bias)
        block.bn = nn.Identity()
        block.spec.batchnorm = False
    return model


def _all_blocks(model: MultiTaskModel):
    for name, block in model.trunk_blocks.items():
        yield name, block
    for head_name, blocks in model.head_blocks.items():
        for lname, block in blocks.items():
            yield f"{head_name}.{lname}", block
    for name, block in model.disc_blocks.items():
        yield f"disc.{name}", block


def conv_to_dense(weight: np.ndarray, bias: np.ndarray,
                  in_shape: tuple[int, int, int], stride: int, padding: int,
                  dilation: int) -> tuple[np.ndarray, np.ndarray]:
    """Unroll a convolution on a fixed (C,H,W) grid into a dense matrix.

    Output ordering matches the flattened (C_out, H_out, W_out) tensor, so
    the dense product equals the conv output flattened.
    """
    c_in, h, w = in_shape
    c_out, _, kh, kw = weight.shape
    h_out = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    w_out = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    dense = np.zeros((c_out * h_out * w_out, c_in * h * w), dtype=weight.dtype)
    oy = np.arange(h_out)
    ox = np.arange(w_out)
    for ky in range(kh):
        iy = oy * stride - padding + ky * dilation
        oy_ok = (iy >= 0) & (iy < h)
        for kx in range(kw):
            ix = ox * stride - padding + kx * dilation
            ox_ok = (ix >= 0) & (ix < w)
            for yo in oy[oy_ok]:
                yi = yo * stride - padding + ky * dilation
                for xo in ox[ox_ok]:
                    xi = xo * stride - padding + kx * dilation
                    rows = (np.arange(c_out) * h_out + yo) * w_out + xo
                    cols = (np.arange(c_in) * h + yi) * w + xi
                    dense[np.ix_(rows, cols)] = weight[:, :, ky, kx]
    dense_bias = np.repeat(bias, h_out * w_out)
    return dense, dense_bias


@dataclass
class BackboneLayer:
    name: str
    kind: str                 # conv | pool-max | dense
    params: dict = field(default_factory=dict)   # numpy arrays + hyperparams
    activation: str = "relu"


@dataclass
class BackboneArtifact:
    """Standalone trunk: plain conv/pool layers plus dense bottleneck layers.

    Functionally equivalent to the source base+bottleneck at the anchored
    input resolution; contains no batchnorm statistics.
    """

    layers: list[BackboneLayer]
    input_resolution: int
    provenance: dict = field(default_factory=dict)

    def layer_names(self):
        return [l.name for l in self.layers]

    def forward_features(self, images: torch.Tensor,
                         upto: str | None = None) -> dict[str, torch.Tensor]:
        """Run the backbone, returning post-activation maps per layer.

        Dense layers yield flat (B, F) tensors.
        """
        x = images
        acts = {}
        flat = False
        for layer in self.layers:
            if layer.kind == "dense":
                if not flat:
                    x = x.reshape(x.shape[0], -1)
                    flat = True
                wt = torch.from_numpy(layer.params["weight"]).to(x.dtype)
                bt = torch.from_numpy(layer.params["bias"]).to(x.dtype)
                x = F.linear(x, wt, bt)
            elif layer.kind == CONV:
                wt = torch.from_numpy(layer.params["weight"]).to(x.dtype)
                bt = torch.from_numpy(layer.params["bias"]).to(x.dtype)
                x = F.conv2d(x, wt, bt, layer.params["stride"],
                             layer.params["padding"], layer.params["dilation"])
            elif layer.kind == POOL:
                x = F.max_pool2d(x, layer.params["kernel"], layer.params["stride"],
                                 layer.params["padding"])
            else:
                raise ValueError(layer.kind)
            if layer.activation == "relu":
                x = torch.relu(x)
            acts[layer.name] = x
            if upto is not None and layer.name == upto:
                break
        return acts

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward_features(images)[self.layers[-1].name]

    def save(self, path, kind: str = "backbone"):
        arrays = {}
        manifest = []
        for layer in self.layers:
            entry = {"name": layer.name, "kind": layer.kind,
                     "activation": layer.activation, "hyper": {}}
            for k, v in layer.params.items():
                if isinstance(v, np.ndarray):
                    arrays[f"{layer.name}/{k}"] = v
                else:
                    entry["hyper"][k] = v
            manifest.append(entry)
        meta = {"layers": manifest, "input_resolution": self.input_resolution,
                "provenance": self.provenance}
        ckpt_io.write_archive(path, kind, meta, arrays)

    @staticmethod
    def load(path) -> "BackboneArtifact":
        meta, arrays, _ = ckpt_io.read_archive(path)
        if meta["kind"] != "backbone":
            raise ValueError(f"{path}: expected a backbone archive")
        layers = []
        for entry in meta["layers"]:
            params = dict(entry["hyper"])
            for name, arr in arrays.items():
                lname, _, pname = name.partition("/")
                if lname == entry["name"]:
                    params[pname] = arr
            layers.append(BackboneLayer(entry["name"], entry["kind"], params,
                                        entry["activation"]))
        return BackboneArtifact(layers, meta["input_resolution"],
                                meta["provenance"])


def convert_fc(model: MultiTaskModel, provenance: dict | None = None) -> BackboneArtifact:
    """Build the standalone backbone; bottleneck convs become dense layers.

    Requires batchnorm to be absorbed first, and a fixed training resolution
    to anchor the dense conversion.
    """
    for name, block in model.trunk_blocks.items():
        if not isinstance(block.bn, nn.Identity):
            raise ValueError(f"{name}: absorb batchnorm before converting")
    shapes = model.config.trunk_shapes()
    layers = []
    for spec in model.config.base:
        block = model.trunk_blocks[spec.name]
        if spec.kind == POOL:
            layers.append(BackboneLayer(spec.name, POOL, {
                "kernel": spec.kernel, "stride": spec.stride,
                "padding": spec.padding}, activation="none"))
        else:
            layers.append(BackboneLayer(spec.name, CONV, {
                "weight": block.op.weight.detach().numpy().copy(),
                "bias": block.op.bias.detach().numpy().copy(),
                "stride": spec.stride, "padding": spec.padding,
                "dilation": spec.dilation},
                activation=spec.activation))
    # dense conversion anchored at the training-resolution feature grid
    in_shape = shapes[model.config.base[-1].name]
    for spec in model.config.bottleneck:
        block = model.trunk_blocks[spec.name]
        dense_w, dense_b = conv_to_dense(
            block.op.weight.detach().numpy(), block.op.bias.detach().numpy(),
            in_shape, spec.stride, spec.padding, spec.dilation)
        layers.append(BackboneLayer(spec.name, "dense",
                                    {"weight": dense_w, "bias": dense_b},
                                    activation=spec.activation))
        in_shape = shapes[spec.name]
    return BackboneArtifact(layers, model.config.input_resolution,
                            provenance or {})


def rescale_weights(backbone: BackboneArtifact,
                    calibration_batches: list[torch.Tensor],
                    target_std: float = 1.0) -> tuple[BackboneArtifact, dict[str, float]]:
    """Normalize each parametric layer's output std to 1 on calibration data.

    Scales are compensated in the following parametric layer, so the network
    function is preserved up to the final layer's recorded scale. Returns the
    rescaled backbone and the per-layer scale factors.
    """
    if not calibration_batches:
        raise ValueError("need calibration batches")
    backbone = copy.deepcopy(backbone)
    scales: dict[str, float] = {}
    parametric = [l for l in backbone.layers if l.kind in (CONV, "dense")]
    for i, layer in enumerate(parametric):
        stds = []
        with torch.no_grad():
            for batch in calibration_batches:
                acts = backbone.forward_features(batch, upto=layer.name)
                stds.append(float(acts[layer.name].std()))
        s = float(np.mean(stds)) / target_std
        if s == 0.0:
            raise ValueError(f"{layer.name}: zero-variance activations")
        layer.params["weight"] = layer.params["weight"] / s
        layer.params["bias"] = layer.params["bias"] / s
        if i + 1 < len(parametric):
            nxt = parametric[i + 1]
            nxt.params["weight"] = nxt.params["weight"] * s
        scales[layer.name] = s
    backbone.provenance = {**backbone.provenance, "rescale_scales": scales}
    return backbone, scales
