class MtlError(Exception):
    """ Base class of every error raised by the library """


class ConfigurationError(MtlError):
    """ A configuration value, or an array shape derived from it, is invalid """


class InvalidTargetError(MtlError):
    """ Empty label sequence or label index out of range """


class InfeasibleTargetError(InvalidTargetError):
    """ Too few frames for any CTC path to emit the label sequence """


class ContractViolation(MtlError):
    """ An input breaks a documented precondition (e.g. unnormalized log-probs) """


class NumericError(MtlError):
    """ Non-finite values where finite ones are required """


class TrainingDivergedError(NumericError):
    pass


class InternalError(MtlError):
    """ Stale or mismatched forward cache handed to a backward pass """


class TransferError(MtlError):
    def __init__(self, mismatched):
        self.mismatched = list(mismatched)
        super().__init__("Cannot transfer encoder, incompatible parameters: " + ", ".join(self.mismatched))


class CheckpointError(MtlError):
    pass


class DatasetLoadError(MtlError):
    pass


class InvalidInputError(MtlError):
    pass
