from .cross_validation import CrossValidationComposer, create_cross_validation_state, summarize_folds
