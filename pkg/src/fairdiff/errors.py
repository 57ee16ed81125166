"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``InputError`` (and subclasses) -> 2,
``QualityError`` -> 3, ``OSError`` -> 1.
"""


class FairDiffError(Exception):
    pass


class InputError(FairDiffError, ValueError):
    """Invalid input: wrong shapes, empty data, malformed files."""


class ShapeError(InputError):
    pass


class SpecificationError(InputError):
    pass


class DegenerateInputError(InputError):
    pass


class ConceptLookupError(InputError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ParseError(InputError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


class NumericError(FairDiffError, ArithmeticError):
    pass


class QualityError(FairDiffError):
    def __init__(self, message, accuracy=None):
        super().__init__(message)
        self.accuracy = accuracy
