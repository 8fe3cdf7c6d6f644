"""Model assembly: history encoder, coarse belief decoder, fine offset
decoder, and multi-scale replication.

The encoder runs a convolutional recurrence over the observed frames; its
final state initializes both decoders. The coarse decoder advances a
belief map over grid cells (graph update on the hidden state, embedded
previous belief as input, 1-channel conv head + spatial softmax). The fine
decoder advances a per-cell 2-vector offset field with the same recurrent
scheme. During training the belief feeds back as the predicted soft
distribution; inference feeds back hard one-hot selections (see
``inference``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import nn_core as nn
from .autodiff import Var
from .errors import ConfigError, ShapeError
from .gridworld import GridSpec, pool_factor, quantize_trajectory
from .scenegen import Scenario, one_hot_semantic, temporal_average

FINE_SCALE = "fine"
COARSE_SCALE = "coarse"


@dataclass(frozen=True)
class ModelConfig:
    d_enc: int = 256
    d_dec: int = 256
    d_e: int = 32
    kernel: int = 3
    head_kernel: int = 1
    use_gat: bool = True
    use_fine_decoder: bool = True
    use_multi_scale: bool = True
    gat_mode: str = "residual"  # or "weighted"
    k_classes: int = 13
    h: int = 8
    max_pred_len: int = 26

    def __post_init__(self):
        if self.d_enc != self.d_dec:
            raise ConfigError(
                "decoder hidden size must equal encoder hidden size "
                f"(decoders start from the encoder state): {self.d_enc} vs {self.d_dec}"
            )
        for name in ("d_enc", "d_dec", "d_e", "k_classes", "h", "max_pred_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.kernel % 2 == 0 or self.head_kernel % 2 == 0:
            raise ConfigError("conv kernels must be odd-sized")
        if self.gat_mode not in ("residual", "weighted"):
            raise ConfigError(f"unknown gat_mode {self.gat_mode!r}")

    @property
    def scales(self) -> Tuple[str, ...]:
        return (FINE_SCALE, COARSE_SCALE) if self.use_multi_scale else (FINE_SCALE,)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class EncoderState:
    """Final recurrent state of the history encoder plus the mean scene map."""

    hidden: Var  # (H, W, d_enc)
    cell: Var
    s_bar: Var  # (H, W, K)


@dataclass
class ScaleRollout:
    beliefs: List[Var]  # each (H_s, W_s), sums to 1
    offsets: Optional[List[Var]]  # each (H_s, W_s, 2); None without fine decoder
    grid: GridSpec


class Forecaster:
    """Multi-future trajectory model over grid scene graphs."""

    def __init__(self, config: ModelConfig, store: Optional[nn.ParameterStore] = None,
                 seed: int = 0):
        self.config = config
        self.store = store if store is not None else nn.ParameterStore(seed=seed)
        self._build()

    # -- parameters ---------------------------------------------------------

    def _build(self):
        c = self.config
        k = c.kernel
        self.store.add("enc.sem.w", (k, k, c.k_classes, c.d_enc))
        self.store.add("enc.sem.b", (c.d_enc,), init="zeros")
        self._add_cell("enc.cell", c.d_enc, c.d_enc)
        for scale in c.scales:
            p = f"dec.{scale}"
            if c.use_gat:
                self._add_gat(f"{p}.bel.gat")
            self._add_cell(f"{p}.bel.cell", c.d_e, c.d_dec)
            self.store.add(f"{p}.bel.emb.w", (c.d_e,))
            self.store.add(f"{p}.bel.emb.b", (c.d_e,), init="zeros")
            hk = c.head_kernel
            self.store.add(f"{p}.bel.head.w", (hk, hk, c.d_dec, 1))
            self.store.add(f"{p}.bel.head.b", (1,), init="zeros")
            if c.use_fine_decoder:
                if c.use_gat:
                    self._add_gat(f"{p}.off.gat")
                self._add_cell(f"{p}.off.cell", 2, c.d_dec)
                self.store.add(f"{p}.off.head.w1", (1, 1, c.d_dec, c.d_dec))
                self.store.add(f"{p}.off.head.b1", (c.d_dec,), init="zeros")
                self.store.add(f"{p}.off.head.w2", (1, 1, c.d_dec, 2))
                self.store.add(f"{p}.off.head.b2", (2,), init="zeros")

    def _add_cell(self, prefix: str, in_ch: int, d: int):
        k = self.config.kernel
        self.store.add(f"{prefix}.w", (k, k, in_ch + d, 4 * d))
        b = self.store.add(f"{prefix}.b", (4 * d,), init="zeros")
        b[d : 2 * d] = 1.0  # open forget gates at the start of training

    def _add_gat(self, prefix: str):
        c = self.config
        out_dim = c.d_dec if c.gat_mode == "residual" else 1
        shapes = nn.gat_params_shapes(c.d_dec, c.k_classes)
        shapes["w2"] = (shapes["w2"][0], out_dim)
        shapes["b2"] = (out_dim,)
        for name, shape in shapes.items():
            init = "zeros" if name.startswith("b") else "glorot"
            self.store.add(f"{prefix}.{name}", shape, init=init)

    def _gat_vars(self, tape: nn.ParamTape, prefix: str) -> Dict[str, Var]:
        return {n: tape.var(f"{prefix}.{n}") for n in ("w1", "b1", "w2", "b2")}

    # -- encoder ------------------------------------------------------------

    def encode_history(
        self, scenario: Scenario, tape: Optional[nn.ParamTape] = None,
        strict_bounds: bool = False,
    ) -> EncoderState:
        """Run the recurrence over the observed frames.

        Each step's input is the one-hot location map multiplied into a
        convolutional transform of the one-hot scene map.
        """
        tape = tape or nn.ParamTape(self.store)
        dtype = self.store.dtype
        grid = scenario.fine_grid
        if self.config.k_classes != scenario.semantic_maps[0].k_classes:
            raise ConfigError(
                f"model expects {self.config.k_classes} semantic classes, scenario "
                f"has {scenario.semantic_maps[0].k_classes}"
            )
        cells = quantize_trajectory(grid, scenario.history, clamp=not strict_bounds)
        maps = [one_hot_semantic(m).astype(dtype) for m in scenario.maps_for_frames()]
        s_bar = Var(temporal_average(maps).astype(dtype))

        h = Var(np.zeros((grid.rows, grid.cols, self.config.d_enc), dtype=dtype))
        c = Var(np.zeros_like(h.data))
        w_sem, b_sem = tape.var("enc.sem.w"), tape.var("enc.sem.b")
        w_cell, b_cell = tape.var("enc.cell.w"), tape.var("enc.cell.b")
        for cell_idx, sem in zip(cells, maps):
            onehot = np.zeros((grid.rows, grid.cols, 1), dtype=dtype)
            onehot[cell_idx // grid.cols, cell_idx % grid.cols, 0] = 1.0
            x = ad.mul(ad.conv2d(Var(sem), w_sem, b_sem), onehot)
            h, c = nn.convrnn_step(x, h, c, w_cell, b_cell)
        return EncoderState(hidden=h, cell=c, s_bar=s_bar)

    # -- decoder steps ------------------------------------------------------

    def coarse_step(
        self,
        scale: str,
        hidden: Var,
        cell: Var,
        prev_belief: Var,
        s_bar: Var,
        tape: Optional[nn.ParamTape] = None,
    ) -> Tuple[Var, Var, Var]:
        """One belief-decoder step: returns (hidden, cell, belief)."""
        tape = tape or nn.ParamTape(self.store)
        p = f"dec.{scale}"
        edges = nn.grid_edges(hidden.data.shape[0], hidden.data.shape[1])
        if self.config.use_gat:
            hidden = nn.gat_layer(
                hidden, s_bar, self._gat_vars(tape, f"{p}.bel.gat"), edges,
                self.config.gat_mode,
            )
        x = nn.embed_belief(
            prev_belief, tape.var(f"{p}.bel.emb.w"), tape.var(f"{p}.bel.emb.b")
        )
        h, c = nn.convrnn_step(x, hidden, cell, tape.var(f"{p}.bel.cell.w"),
                               tape.var(f"{p}.bel.cell.b"))
        logits = ad.conv2d(h, tape.var(f"{p}.bel.head.w"), tape.var(f"{p}.bel.head.b"))
        belief = nn.spatial_softmax(ad.reshape(logits, logits.data.shape[:2]))
        return h, c, belief

    def fine_step(
        self,
        scale: str,
        hidden: Var,
        cell: Var,
        prev_offsets: Var,
        s_bar: Var,
        tape: Optional[nn.ParamTape] = None,
    ) -> Tuple[Var, Var, Var]:
        """One offset-decoder step: returns (hidden, cell, offsets)."""
        tape = tape or nn.ParamTape(self.store)
        p = f"dec.{scale}"
        edges = nn.grid_edges(hidden.data.shape[0], hidden.data.shape[1])
        if self.config.use_gat:
            hidden = nn.gat_layer(
                hidden, s_bar, self._gat_vars(tape, f"{p}.off.gat"), edges,
                self.config.gat_mode,
            )
        h, c = nn.convrnn_step(prev_offsets, hidden, cell,
                               tape.var(f"{p}.off.cell.w"), tape.var(f"{p}.off.cell.b"))
        mid = ad.tanh(ad.conv2d(h, tape.var(f"{p}.off.head.w1"), tape.var(f"{p}.off.head.b1")))
        offsets = ad.conv2d(mid, tape.var(f"{p}.off.head.w2"), tape.var(f"{p}.off.head.b2"))
        return h, c, offsets

    # -- rollout ------------------------------------------------------------

    def scale_grid(self, scenario: Scenario, scale: str) -> GridSpec:
        return scenario.fine_grid if scale == FINE_SCALE else scenario.coarse_grid

    def _scale_init(
        self, scenario: Scenario, scale: str, enc: EncoderState
    ) -> Tuple[Var, Var, Var, GridSpec]:
        """Decoder-scale initial (hidden, cell, s_bar) plus the scale's grid."""
        if scale == FINE_SCALE:
            return enc.hidden, enc.cell, enc.s_bar, scenario.fine_grid
        factor = pool_factor(scenario.fine_grid, scenario.coarse_grid)
        return (
            ad.avg_pool2d(enc.hidden, factor),
            ad.avg_pool2d(enc.cell, factor),
            ad.avg_pool2d(enc.s_bar, factor),
            scenario.coarse_grid,
        )

    def seed_belief(self, scenario: Scenario, scale: str) -> np.ndarray:
        """One-hot of the last observed cell, used as the first feedback."""
        grid = self.scale_grid(scenario, scale)
        idx = quantize_trajectory(grid, scenario.history[-1:])[0]
        seed = np.zeros((grid.rows, grid.cols), dtype=self.store.dtype)
        seed[idx // grid.cols, idx % grid.cols] = 1.0
        return seed

    def rollout(
        self,
        scenario: Scenario,
        steps: int,
        tape: Optional[nn.ParamTape] = None,
        enc: Optional[EncoderState] = None,
        strict_bounds: bool = False,
    ) -> Dict[str, ScaleRollout]:
        """Autoregressive decode for ``steps`` frames on every configured scale.

        Both decoders start from the encoder's final state. The first-step
        inputs are the one-hot of the last observed cell (belief feedback)
        and a zero offset field; afterwards the predicted soft belief and
        predicted offsets feed back.
        """
        if steps < 1:
            raise ShapeError("rollout needs steps >= 1")
        tape = tape or nn.ParamTape(self.store)
        if enc is None:
            enc = self.encode_history(scenario, tape, strict_bounds=strict_bounds)
        out: Dict[str, ScaleRollout] = {}
        for scale in self.config.scales:
            h_b, c_b, s_bar, grid = self._scale_init(scenario, scale, enc)
            h_o, c_o = h_b, c_b
            belief = Var(self.seed_belief(scenario, scale))
            offsets = Var(np.zeros((grid.rows, grid.cols, 2), dtype=self.store.dtype))
            beliefs: List[Var] = []
            offs: List[Var] = []
            for _ in range(steps):
                h_b, c_b, belief = self.coarse_step(scale, h_b, c_b, belief, s_bar, tape)
                beliefs.append(belief)
                if self.config.use_fine_decoder:
                    h_o, c_o, offsets = self.fine_step(scale, h_o, c_o, offsets, s_bar, tape)
                    offs.append(offsets)
            out[scale] = ScaleRollout(
                beliefs=beliefs,
                offsets=offs if self.config.use_fine_decoder else None,
                grid=grid,
            )
        return out
