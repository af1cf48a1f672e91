# vivarium_ppap/__init__.py
from .processes import PPAPTrainingProcess, PPAPQueryProcess
from .composites import CrossValidationComposer


__all__ = ['PPAPTrainingProcess', 'PPAPQueryProcess', 'CrossValidationComposer']
