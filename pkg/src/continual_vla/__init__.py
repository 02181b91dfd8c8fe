"""Continual imitation learning for a toy vision-language-action policy.

Modules:

* :mod:`.autodiff` reverse-mode autodiff over float64 numpy arrays
* :mod:`.policy` patch/instruction encoder, fusion attention, flow-matching head
* :mod:`.losses` flow matching, replay-anchor contrastive, mutual information, EWC
* :mod:`.replay` per-task trajectory memory and mixed batches
* :mod:`.suite` synthetic pick-and-place tasks, scripted expert, rollouts
* :mod:`.trainer` stage loop for every strategy and run-directory outputs
* :mod:`.metrics` success-matrix metrics and structure diagnostics
* :mod:`.cli` the ``continual-vla`` command
"""

__version__ = "0.1.0"
