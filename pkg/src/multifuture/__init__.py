"""Multi-future trajectory forecasting on grid scene graphs.

Subpackages: grid geometry (``gridworld``), scenario generation and files
(``scenegen``), the autodiff tape (``autodiff``), differentiable blocks
(``nn_core``), the model (``model``), training (``training``), decoding
(``inference``), evaluation (``metrics``), checkpoints (``persistence``),
and the command line (``cli``).
"""

__version__ = "0.1.0"
