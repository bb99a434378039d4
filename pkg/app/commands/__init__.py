from . import match, report, synth, train


__all__ = ["synth", "train", "match", "report"]
