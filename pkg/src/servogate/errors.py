"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented codes: 2 config, 3 data, 4 numeric degeneracy.
"""


class ServoGateError(Exception):
    exit_code = 3


class ConfigError(ServoGateError, ValueError):
    exit_code = 2


class EmptyInput(ServoGateError, ValueError):
    pass


class NotARotation(ServoGateError, ValueError):
    def __init__(self, deviation, message=None):
        self.deviation = float(deviation)
        super().__init__(message or f"not a proper rotation (max deviation {self.deviation:.3g})")


class TooFewMembers(ServoGateError, ValueError):
    pass


class DegenerateMean(ServoGateError, ArithmeticError):
    exit_code = 4


class MissingStep(ServoGateError, LookupError):
    pass


class UndefinedRate(ServoGateError, ArithmeticError):
    exit_code = 4


class DegenerateDistribution(ServoGateError, ArithmeticError):
    exit_code = 4


class EmptyCloud(ServoGateError, ValueError):
    pass


class BadCount(ServoGateError, ValueError):
    pass


class ParseError(ServoGateError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class RankDeficient(ServoGateError, ArithmeticError):
    exit_code = 4


class GraspOnAnchor(ServoGateError, ValueError):
    pass


class ActionOutOfRange(ServoGateError, ValueError):
    pass
