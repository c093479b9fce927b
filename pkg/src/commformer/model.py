"""The full model: encoder, target encoder, decoder, graph logits and gates.

All parameters live in one ParameterStore under fixed prefixes so one
checkpoint captures everything:

- ``encoder.*``        critic / representation network (phi)
- ``target_encoder.*`` slowly tracking copy of the encoder (phi bar)
- ``decoder.*``        actor (theta)
- ``alpha``            communication-graph logits
- ``gate.*``           per-agent dynamic gates (K)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from commformer.commgraph import AdjacencyLogits, CommGraph, SparsitySpec, argmax_khot
from commformer.diffmath import ParameterStore, no_grad
from commformer.gating import GateNetwork
from commformer.relformer import Decoder, Encoder

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int
    n_actions: int
    n_agents: int
    sparsity: float = 0.4
    hidden_dim: int = 64
    n_blocks: int = 1
    gate_recurrent: bool = False
    alpha_init_scale: float = 0.01
    dtype: str = "float64"

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


class CommFormer:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.spec = SparsitySpec(config.sparsity, config.n_agents)
        dtype = config.np_dtype
        d, blocks = config.hidden_dim, config.n_blocks
        self.store = ParameterStore()
        self.encoder = Encoder(self.store, "encoder", config.obs_dim, d, blocks, rng, dtype=dtype)
        self.decoder = Decoder(self.store, "decoder", config.n_actions, d, blocks, rng, dtype=dtype)
        self.logits = AdjacencyLogits(self.store, config.n_agents, rng, init_scale=config.alpha_init_scale,
                                      dtype=dtype)
        self.gates = GateNetwork(self.store, "gate", config.n_agents, config.obs_dim, d, rng,
                                 recurrent=config.gate_recurrent, dtype=dtype)
        # the target copy is only ever evaluated without gradient tracking;
        # its init draws come from a throwaway rng and are overwritten at once
        self.target_encoder = Encoder(self.store, "target_encoder", config.obs_dim, d, blocks,
                                      np.random.default_rng(0), dtype=dtype)
        for target, source in self.target_pairs():
            target.data = source.data.copy()

    @property
    def alpha(self):
        return self.logits.alpha

    def backbone_params(self) -> ParameterStore:
        return self.store.subset("encoder.").merged(self.store.subset("decoder."))

    def alpha_params(self) -> ParameterStore:
        return self.store.subset("alpha")

    def gate_params(self) -> ParameterStore:
        return self.store.subset("gate.")

    def target_pairs(self):
        """``(target, source)`` tensor pairs for the target-encoder update."""
        prefix = "target_encoder."
        return [(t, self.store["encoder." + name[len(prefix):]]) for name, t in self.store.items()
                if name.startswith(prefix)]

    def execution_graph(self) -> CommGraph:
        """Deterministic top-k graph with no gradient attached."""
        with no_grad():
            g = argmax_khot(self.logits, self.spec)
        return CommGraph(edges=g.edges)
