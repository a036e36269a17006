"""Exception hierarchy shared by every module."""


class DTGError(Exception):
    """Base class for data-level failures (CLI exit code 2)."""


class MalformedLine(DTGError):
    pass


class NonIntegerHead(DTGError):
    pass


class HeadOutOfRange(DTGError):
    pass


class CycleDetected(DTGError):
    pass


class NonProjective(DTGError):
    pass


class MultipleRoots(DTGError):
    pass


class TooLarge(DTGError):
    pass


class UnknownForm(DTGError):
    pass


class IllegalTransition(DTGError):
    def __init__(self, index, message=""):
        self.index = index
        super().__init__(f"illegal transition at {index}" + (f": {message}" if message else ""))


class IncompleteParse(DTGError):
    pass


class OracleStuck(DTGError):
    pass


class StackUnderflow(DTGError):
    pass


class OutOfVocab(DTGError):
    pass


class ShapeMismatch(DTGError):
    pass


class Divergence(DTGError):
    pass


class NoLegalTransition(DTGError):
    pass


class EmptyProposal(DTGError):
    pass


class BeamExhausted(DTGError):
    pass


class EmptyCorpus(DTGError):
    pass


class LengthMismatch(DTGError):
    pass


class IndexOutOfSentence(DTGError):
    pass
