"""Built-in 5x7 bitmap font (uppercase letters and digits)."""

import numpy as np

_ROWS = {
    "A": ["01110", "10001", "10001", "11111", "10001", "10001", "10001"],
    "B": ["11110", "10001", "10001", "11110", "10001", "10001", "11110"],
    "C": ["01110", "10001", "10000", "10000", "10000", "10001", "01110"],
    "D": ["11100", "10010", "10001", "10001", "10001", "10010", "11100"],
    "E": ["11111", "10000", "10000", "11110", "10000", "10000", "11111"],
    "F": ["11111", "10000", "10000", "11110", "10000", "10000", "10000"],
    "G": ["01110", "10001", "10000", "10111", "10001", "10001", "01111"],
    "H": ["10001", "10001", "10001", "11111", "10001", "10001", "10001"],
    "I": ["01110", "00100", "00100", "00100", "00100", "00100", "01110"],
    "J": ["00111", "00010", "00010", "00010", "00010", "10010", "01100"],
    "K": ["10001", "10010", "10100", "11000", "10100", "10010", "10001"],
    "L": ["10000", "10000", "10000", "10000", "10000", "10000", "11111"],
    "M": ["10001", "11011", "10101", "10101", "10001", "10001", "10001"],
    "N": ["10001", "10001", "11001", "10101", "10011", "10001", "10001"],
    "O": ["01110", "10001", "10001", "10001", "10001", "10001", "01110"],
    "P": ["11110", "10001", "10001", "11110", "10000", "10000", "10000"],
    "Q": ["01110", "10001", "10001", "10001", "10101", "10010", "01101"],
    "R": ["11110", "10001", "10001", "11110", "10100", "10010", "10001"],
    "S": ["01111", "10000", "10000", "01110", "00001", "00001", "11110"],
    "T": ["11111", "00100", "00100", "00100", "00100", "00100", "00100"],
    "U": ["10001", "10001", "10001", "10001", "10001", "10001", "01110"],
    "V": ["10001", "10001", "10001", "10001", "10001", "01010", "00100"],
    "W": ["10001", "10001", "10001", "10101", "10101", "10101", "01010"],
    "X": ["10001", "10001", "01010", "00100", "01010", "10001", "10001"],
    "Y": ["10001", "10001", "01010", "00100", "00100", "00100", "00100"],
    "Z": ["11111", "00001", "00010", "00100", "01000", "10000", "11111"],
    "0": ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    "1": ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    "2": ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    "3": ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    "4": ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    "5": ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    "6": ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    "7": ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    "8": ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    "9": ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}

GLYPH_H, GLYPH_W = 7, 5
ALPHABET = "".join(sorted(_ROWS))
GLYPHS = {ch: np.array([[c == "1" for c in row] for row in rows], dtype=bool)
          for ch, rows in _ROWS.items()}


def render_word(text, scale):
    """Boolean coverage of ``text`` at integer ``scale`` with one scaled column of spacing."""
    cells = []
    for i, ch in enumerate(text):
        if i:
            cells.append(np.zeros((GLYPH_H, 1), dtype=bool))
        cells.append(GLYPHS[ch])
    bitmap = np.concatenate(cells, axis=1)
    return np.kron(bitmap, np.ones((scale, scale), dtype=bool))


def word_skeleton(text, scale):
    """One-pixel centerline of the scaled word: cell centres linked to 8-neighbour cells."""
    cells = []
    for i, ch in enumerate(text):
        if i:
            cells.append(np.zeros((GLYPH_H, 1), dtype=bool))
        cells.append(GLYPHS[ch])
    bitmap = np.concatenate(cells, axis=1)
    h, w = bitmap.shape
    out = np.zeros((h * scale, w * scale), dtype=bool)
    half = scale // 2
    on = list(zip(*np.nonzero(bitmap)))
    for r, c in on:
        cy, cx = r * scale + half, c * scale + half
        out[cy, cx] = True
        for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and bitmap[rr, cc]:
                # at even scales the anti-diagonal starts half a pixel left so it stays on strokes
                x0 = c * scale + (scale - 1) // 2 if dc < 0 else cx
                for k in range(scale + 1):
                    out[cy + dr * k, x0 + dc * k] = True
    return out
