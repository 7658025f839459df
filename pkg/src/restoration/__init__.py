"""Portrait restoration: alignment, degradation, identity, model, data, training, evaluation"""
