class LinkList:
    """1-D world: a list of cells with a cursor that starts on the first cell."""

    def __init__(self, values):
        self._cells = list(values)
        self._pos = 0

    def go_next(self):
        if self._pos + 1 >= len(self._cells):
            raise IndexError("go_next: no next cell")
        self._pos += 1

    def go_prev(self):
        if self._pos == 0:
            raise IndexError("go_prev: no previous cell")
        self._pos -= 1

    def get_value(self):
        return self._cells[self._pos]

    def set_value(self, value):
        self._cells[self._pos] = value

    def has_next(self):
        return self._pos + 1 < len(self._cells)

    def has_prev(self):
        return self._pos > 0


def __harness_args__(args):
    return [LinkList(a) if isinstance(a, list) else a for a in args]
