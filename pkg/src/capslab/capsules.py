"""Capsule data types and the layer stack.

A network is always backbone -> primary capsules -> L convolutional capsule
layers -> class capsules. The depth convention counts only the convolutional
capsule layers, so a depth-L network performs L+1 routing instances
(primary->conv, conv->conv, last conv->class).

Backbone: two convolutions (32 then n_caps*(P*P+1) channels, kernel 5,
stride 2, padding 2, tanh after each), shared by all routing algorithms so
depth comparisons are apples-to-apples. Primary capsules read poses from a
1x1 convolution and activations from a 1x1 convolution plus logistic.
Convolutional capsule layers gather a kernel x kernel window of lower
capsules per output position, transform them into votes, and hand the vote
field to the configured routing algorithm; class capsules aggregate every
spatial position with transform matrices shared per input-capsule type.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import routing as R
from . import tensor as T
from .containers import load_container, save_container
from .errors import ConfigurationError, ShapeError
from .routing import RoutingConfig, RoutingOutput, SelfRoutingParams, VoteField
from .tensor import Tensor

BACKBONE_HIDDEN_CHANNELS = 32
BACKBONE_KERNEL = 5
BACKBONE_STRIDE = 2
BACKBONE_PADDING = 2
SOFT_DEPTH_CAP = 10
# nominal per-dimension vote variance at initialization, used to center the
# variational activation's logistic argument (see _vb_beta_a_init)
NOMINAL_VOTE_VARIANCE = 0.25


@dataclass
class CapsuleTensor:
    """One layer's grid of capsules: poses [B,H,W,n,P,P], activations
    [B,H,W,n] with every activation in [0,1]."""

    poses: Tensor
    activations: Tensor

    def __post_init__(self):
        p, a = self.poses, self.activations
        if p.ndim != 6 or p.shape[-1] != p.shape[-2]:
            raise ShapeError(f"poses must be [B,H,W,n,P,P], got {p.shape}")
        if a.shape != p.shape[:4]:
            raise ShapeError(
                f"activations {a.shape} do not match poses {p.shape}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.poses.shape[1], self.poses.shape[2]

    @property
    def n_caps(self) -> int:
        return self.poses.shape[3]


@dataclass
class LayerSpec:
    kind: str  # backbone | primary | conv_caps | class_caps
    n_caps: int = 16
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    routing: RoutingConfig | None = None


@dataclass
class NetworkSpec:
    """Architecture description; parameter shapes are a pure function of it."""

    n_conv_caps_layers: int
    n_classes: int
    routing_algorithm: str
    n_caps: int = 16
    pose_dim: int = 4
    in_channels: int = 1
    image_size: int = 12
    routing_iterations: int = 3
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.n_conv_caps_layers < 1:
            raise ConfigurationError("need at least one conv-caps layer")
        if self.n_conv_caps_layers > SOFT_DEPTH_CAP:
            warnings.warn(
                f"{self.n_conv_caps_layers} conv-caps layers exceeds the "
                f"studied range of {SOFT_DEPTH_CAP}",
                stacklevel=2,
            )
        if self.n_caps < 1:
            raise ConfigurationError("n_caps must be positive")
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.pose_dim < 1:
            raise ConfigurationError(
                f"pose matrices must be square with positive extent, got "
                f"P={self.pose_dim}"
            )
        if self.routing_algorithm not in R.ALGORITHMS:
            raise ConfigurationError(
                f"unknown routing algorithm {self.routing_algorithm!r}"
            )
        if self.in_channels < 1 or self.image_size < 1:
            raise ConfigurationError("invalid input geometry")

    @property
    def feature_channels(self) -> int:
        return self.n_caps * (self.pose_dim * self.pose_dim + 1)

    def routing_config(self) -> RoutingConfig:
        return RoutingConfig(
            algorithm=self.routing_algorithm,
            iterations=self.routing_iterations,
            epsilon=self.epsilon,
        )

    def layer_specs(self) -> list[LayerSpec]:
        cfg = self.routing_config()
        layers = [
            LayerSpec(kind="backbone", n_caps=0, kernel=BACKBONE_KERNEL,
                      stride=BACKBONE_STRIDE, padding=BACKBONE_PADDING),
            LayerSpec(kind="primary", n_caps=self.n_caps, kernel=1, stride=1,
                      padding=0),
        ]
        layers += [
            LayerSpec(kind="conv_caps", n_caps=self.n_caps, routing=cfg)
            for _ in range(self.n_conv_caps_layers)
        ]
        layers.append(
            LayerSpec(kind="class_caps", n_caps=self.n_classes, kernel=0,
                      stride=0, padding=0, routing=cfg)
        )
        return layers

    def to_dict(self) -> dict:
        return {
            "n_conv_caps_layers": self.n_conv_caps_layers,
            "n_classes": self.n_classes,
            "routing_algorithm": self.routing_algorithm,
            "n_caps": self.n_caps,
            "pose_dim": self.pose_dim,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "routing_iterations": self.routing_iterations,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


@dataclass
class ForwardResult:
    class_poses: Tensor  # [B, n_classes, P, P]
    class_activations: Tensor  # [B, n_classes]
    layer_activations: list[tuple[str, str, np.ndarray]] | None = None


def _grid_after(extent: int, kernel: int, stride: int, padding: int) -> int:
    out = (extent + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise ConfigurationError(
            f"extent {extent} collapses to {out} under kernel {kernel} "
            f"stride {stride} padding {padding}"
        )
    return out


def _vb_beta_a_init(pose_sq: int, n_lower: int, n_higher: int) -> float:
    """Center the variational activation's logistic argument at init.

    With uniform responsibilities and activations near 0.5 the weighted count
    is about n_lower/(2*n_higher); assuming votes have roughly
    NOMINAL_VOTE_VARIANCE per dimension, E[ln det Lambda] is about
    D*ln((N+1)/(N*s+1)) and E[ln pi] about -ln(n_higher)."""
    n_bar = n_lower / (2.0 * n_higher)
    per_dim = np.log((n_bar + 1.0) / (n_bar * NOMINAL_VOTE_VARIANCE + 1.0))
    return float(pose_sq * per_dim - np.log(n_higher))


class Network:
    """The assembled capsule network; owns all parameters as leaf tensors.

    ``routing_calls`` counts routing instances across forwards (each conv
    caps layer and the class layer route exactly once per forward)."""

    def __init__(self, spec: NetworkSpec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self.routing_calls = 0
        self._build(np.random.default_rng(self.seed))

    # -- construction -----------------------------------------------------

    def _param(self, name: str, values: np.ndarray) -> Tensor:
        t = Tensor(values, requires_grad=True)
        self.params[name] = t
        return t

    def _transform_init(self, rng, shape, p):
        w = 0.1 * rng.normal(size=shape)
        w += np.eye(p)
        return w

    def _build(self, rng) -> None:
        s = self.spec
        p = s.pose_dim
        d = p * p
        f = s.feature_channels
        cin = s.in_channels
        k = BACKBONE_KERNEL

        self._param(
            "backbone.conv1.weight",
            rng.normal(size=(BACKBONE_HIDDEN_CHANNELS, cin, k, k))
            / np.sqrt(cin * k * k),
        )
        self._param("backbone.conv1.bias", np.zeros(BACKBONE_HIDDEN_CHANNELS))
        self._param(
            "backbone.conv2.weight",
            rng.normal(size=(f, BACKBONE_HIDDEN_CHANNELS, k, k))
            / np.sqrt(BACKBONE_HIDDEN_CHANNELS * k * k),
        )
        self._param("backbone.conv2.bias", np.zeros(f))

        self._param(
            "primary.pose.weight", rng.normal(size=(f, s.n_caps * d)) / np.sqrt(f)
        )
        self._param("primary.pose.bias", np.zeros(s.n_caps * d))
        self._param(
            "primary.act.weight", rng.normal(size=(f, s.n_caps)) / np.sqrt(f)
        )
        self._param("primary.act.bias", np.zeros(s.n_caps))

        g1 = _grid_after(s.image_size, k, BACKBONE_STRIDE, BACKBONE_PADDING)
        self.grid = _grid_after(g1, k, BACKBONE_STRIDE, BACKBONE_PADDING)

        conv = LayerSpec(kind="conv_caps")  # carries the kernel defaults
        n_window = conv.kernel * conv.kernel * s.n_caps
        for i in range(s.n_conv_caps_layers):
            self._routing_params(
                rng, f"conv{i + 1}", n_window, s.n_caps, p, n_window
            )
        n_class_lower = self.grid * self.grid * s.n_caps
        self._routing_params(
            rng, "class", s.n_caps, s.n_classes, p, n_class_lower
        )

    def _routing_params(self, rng, prefix, n_types, n_out, p, n_lower):
        d = p * p
        algo = self.spec.routing_algorithm
        if algo == "self_routing":
            self._param(
                f"{prefix}.route.weight", 0.1 * rng.normal(size=(n_types, d, n_out))
            )
            self._param(
                f"{prefix}.pose.weight",
                self._transform_init(rng, (n_types, n_out, p, p), p),
            )
        else:
            self._param(
                f"{prefix}.transform",
                self._transform_init(rng, (n_types, n_out, p, p), p),
            )
            if algo == "em":
                self._param(f"{prefix}.beta_a", np.array(1.0))
                self._param(f"{prefix}.beta_u", np.array(0.5))
            elif algo == "vb":
                self._param(
                    f"{prefix}.beta_a",
                    np.array(_vb_beta_a_init(d, n_lower, n_out)),
                )
                self._param(f"{prefix}.beta_u", np.array(0.0))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- layer forwards ----------------------------------------------------

    def backbone_forward(self, images: Tensor) -> Tensor:
        if images.ndim != 4:
            raise ShapeError(f"images must be [N,C,H,W], got {images.shape}")
        if images.shape[1] != self.spec.in_channels:
            raise ConfigurationError(
                f"expected {self.spec.in_channels} input channels, got "
                f"{images.shape[1]}"
            )
        h = T.conv2d(
            images, self.params["backbone.conv1.weight"],
            stride=BACKBONE_STRIDE, padding=BACKBONE_PADDING,
        )
        h = T.tanh(T.add(h, T.reshape(self.params["backbone.conv1.bias"],
                                      (1, -1, 1, 1))))
        h = T.conv2d(
            h, self.params["backbone.conv2.weight"],
            stride=BACKBONE_STRIDE, padding=BACKBONE_PADDING,
        )
        return T.tanh(T.add(h, T.reshape(self.params["backbone.conv2.bias"],
                                         (1, -1, 1, 1))))

    def primary_caps_forward(self, features: Tensor) -> CapsuleTensor:
        s = self.spec
        d = s.pose_dim * s.pose_dim
        b, f, h, w = features.shape
        if f != s.feature_channels:
            raise ConfigurationError(
                f"{f} feature channels do not divide into "
                f"{s.n_caps} capsules x (P*P+1) = {s.feature_channels}"
            )
        x = T.transpose(features, (0, 2, 3, 1))  # [B,H,W,F]
        poses = T.add(
            T.matmul(x, self.params["primary.pose.weight"]),
            self.params["primary.pose.bias"],
        )
        acts = T.logistic(
            T.add(
                T.matmul(x, self.params["primary.act.weight"]),
                self.params["primary.act.bias"],
            )
        )
        return CapsuleTensor(
            poses=T.reshape(poses, (b, h, w, s.n_caps, s.pose_dim, s.pose_dim)),
            activations=acts,
        )

    def _window(self, caps: CapsuleTensor, kernel, stride, padding):
        """Gather kernel x kernel windows; returns flattened
        (poses [B*G, K*K*n, P, P], acts [B*G, K*K*n], out grid)."""
        b, h, w = caps.poses.shape[0], caps.poses.shape[1], caps.poses.shape[2]
        n, p = caps.n_caps, caps.poses.shape[-1]
        c = n * p * p
        ho = _grid_after(h, kernel, stride, padding)
        wo = _grid_after(w, kernel, stride, padding)
        g = ho * wo
        nl = kernel * kernel * n
        pose_img = T.transpose(T.reshape(caps.poses, (b, h, w, c)), (0, 3, 1, 2))
        pose_pat = T.im2col(pose_img, kernel, stride, padding)  # [B,G,C,K,K]
        pose_pat = T.transpose(pose_pat, (0, 1, 3, 4, 2))  # [B,G,K,K,C]
        poses = T.reshape(pose_pat, (b * g, nl, p, p))
        act_img = T.transpose(caps.activations, (0, 3, 1, 2))
        act_pat = T.transpose(
            T.im2col(act_img, kernel, stride, padding), (0, 1, 3, 4, 2)
        )
        acts = T.reshape(act_pat, (b * g, nl))
        return poses, acts, (ho, wo)

    def _route(self, prefix: str, poses: Tensor, acts: Tensor,
               per_position: bool) -> RoutingOutput:
        """Dispatch to the configured algorithm. ``per_position`` selects the
        window transform layout (distinct per window slot) versus the shared
        per-type layout used by the class layer."""
        cfg = self.spec.routing_config()
        algo = cfg.algorithm
        self.routing_calls += 1
        if algo == "self_routing":
            route_w = self.params[f"{prefix}.route.weight"]
            pose_w = self.params[f"{prefix}.pose.weight"]
            if not per_position:
                route_w, pose_w = self._tile_shared(route_w, pose_w, poses)
            return R.self_route(
                poses, acts, SelfRoutingParams(route_w, pose_w), cfg
            )
        w = self.params[f"{prefix}.transform"]
        if per_position:
            if algo == "dynamic":
                votes = T.einsum("ijpq,biqr->bijpr", w, poses)
            else:
                votes = T.einsum("bipq,ijqr->bijpr", poses, w)
        else:
            b = poses.shape[0]
            n = w.shape[0]
            p = poses.shape[-1]
            grouped = T.reshape(poses, (b, poses.shape[1] // n, n, p, p))
            if algo == "dynamic":
                votes = T.einsum("njpq,bsnqr->bsnjpr", w, grouped)
            else:
                votes = T.einsum("bsnpq,njqr->bsnjpr", grouped, w)
            votes = T.reshape(
                votes, (b, poses.shape[1], w.shape[1], p, p)
            )
        field = VoteField(votes, acts)
        if algo == "dynamic":
            return R.dynamic_route(field, cfg)
        beta_a = self.params[f"{prefix}.beta_a"]
        beta_u = self.params[f"{prefix}.beta_u"]
        if algo == "em":
            return R.em_route(field, cfg, beta_a, beta_u)
        return R.vb_route(field, cfg, beta_a, beta_u)

    def _tile_shared(self, route_w, pose_w, poses):
        """Repeat per-type self-routing maps across spatial positions (the
        class layer shares transforms over the grid)."""
        n = route_w.shape[0]
        reps = poses.shape[1] // n
        ones = Tensor(np.ones(reps))
        d, nh = route_w.shape[1], route_w.shape[2]
        p = pose_w.shape[-1]
        route_t = T.reshape(
            T.einsum("idj,s->sidj", route_w, ones), (reps * n, d, nh)
        )
        pose_t = T.reshape(
            T.einsum("ijqr,s->sijqr", pose_w, ones), (reps * n, nh, p, p)
        )
        return route_t, pose_t

    def conv_caps_forward(self, caps: CapsuleTensor, index: int) -> CapsuleTensor:
        layer = LayerSpec(kind="conv_caps")
        b = caps.poses.shape[0]
        n_out = self.spec.n_caps
        p = self.spec.pose_dim
        poses, acts, (ho, wo) = self._window(
            caps, layer.kernel, layer.stride, layer.padding
        )
        out = self._route(f"conv{index}", poses, acts, per_position=True)
        return CapsuleTensor(
            poses=T.reshape(out.poses, (b, ho, wo, n_out, p, p)),
            activations=T.reshape(out.activations, (b, ho, wo, n_out)),
        )

    def class_caps_forward(self, caps: CapsuleTensor) -> tuple[Tensor, Tensor]:
        b, h, w = caps.poses.shape[0], caps.poses.shape[1], caps.poses.shape[2]
        n, p = caps.n_caps, self.spec.pose_dim
        poses = T.reshape(caps.poses, (b, h * w * n, p, p))
        acts = T.reshape(caps.activations, (b, h * w * n))
        out = self._route("class", poses, acts, per_position=False)
        return out.poses, out.activations

    def forward(self, images: Tensor, collect_activations: bool = False
                ) -> ForwardResult:
        telemetry = [] if collect_activations else None

        def grab(name, kind, acts: Tensor):
            if telemetry is not None:
                telemetry.append((name, kind, acts.values.copy()))

        features = self.backbone_forward(images)
        caps = self.primary_caps_forward(features)
        grab("primary", "primary", caps.activations)
        for i in range(self.spec.n_conv_caps_layers):
            caps = self.conv_caps_forward(caps, i + 1)
            grab(f"conv{i + 1}", "conv_caps", caps.activations)
        class_poses, class_acts = self.class_caps_forward(caps)
        grab("class", "class_caps", class_acts)
        return ForwardResult(class_poses, class_acts, telemetry)

    def predict(self, images: Tensor) -> np.ndarray:
        return np.argmax(self.forward(images).class_activations.values, axis=1)


def build_network(spec: NetworkSpec, seed: int) -> Network:
    """Deterministically initialize a network from (spec, seed).

    Parameter counts in closed form (K=3 window, D=P*P, F=n*(D+1), C input
    channels, L conv layers, m classes, B=32 backbone hidden channels):

      backbone   25*B*C + B + 25*F*B + F
      primary    F*n*D + n*D + F*n + n
      conv each  dynamic: 9*n*n*D; em/vb: 9*n*n*D + 2
                 self: 9*n*(D*n + n*D) = 18*n*n*D
      class      dynamic: n*m*D; em/vb: n*m*D + 2; self: 2*n*m*D
    """
    return Network(spec, seed)


def save_checkpoint(network: Network, path) -> None:
    meta = {"kind": "checkpoint", "spec": network.spec.to_dict(),
            "seed": network.seed}
    save_container(path, meta,
                   {k: v.values for k, v in network.params.items()})


def load_checkpoint(path) -> Network:
    meta, tensors = load_container(path)
    if meta.get("kind") != "checkpoint":
        raise ConfigurationError(f"{path} is not a network checkpoint")
    net = Network(NetworkSpec.from_dict(meta["spec"]), meta.get("seed", 0))
    for name, param in net.params.items():
        if name not in tensors:
            raise ConfigurationError(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != param.values.shape:
            raise ConfigurationError(
                f"checkpoint tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {param.values.shape}"
            )
        param.values = tensors[name]
    return net
