"""Learned communication groups for bandwidth-efficient multi-agent perception.

Subpackages by layer: ``densemath`` (linear algebra + seeded RNG),
``commgraph`` (matching-matrix math), ``neuralnet`` (trainable pipeline with
manual backprop), ``scenarios`` (synthetic worlds and episodes), ``simnet``
(decentralized handshake simulator with bandwidth accounting), and ``evalcli``
(metrics, baseline policies, sweeps, command-line entry point).
"""

from . import commgraph, densemath, evalcli, neuralnet, scenarios, simnet

__all__ = ["commgraph", "densemath", "evalcli", "neuralnet", "scenarios", "simnet"]
__version__ = "0.1.0"
