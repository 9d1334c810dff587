"""
Tactile localization library: autodiff core, encoders, alignment loss,
corpus tools, pairing, evaluation and training
"""
