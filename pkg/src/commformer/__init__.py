"""Learned sparse communication graphs for cooperative multi-agent RL.

Subpackages and modules:

- ``diffmath``   numpy reverse-mode autodiff, layers, optimizers, gradcheck
- ``commgraph``  adjacency logits, k-hot sampling, execution graphs, gating masks
- ``relformer``  relation-aware transformer encoder and autoregressive decoder
- ``gating``     per-agent dynamic gates deciding when a row receives messages
- ``trainer``    PPO losses, GAE, rollout buffer and the bi-level loop
- ``envs``       predator-prey grid worlds and a directed-information probe
- ``harness``    configuration, checkpoints, metrics, plot export and the CLI
"""

__version__ = "0.1.0"
