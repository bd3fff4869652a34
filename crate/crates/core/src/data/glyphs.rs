//! Fixed binary digit glyphs used when no IDX source is configured.

pub const N_GLYPHS: usize = 10;
pub const GLYPH_ROWS: usize = 10;
pub const GLYPH_COLS: usize = 8;

/// Top-left corner of an untranslated glyph on a 16x16 canvas. With the
/// +/-2 px jitter the glyph never touches rows 0..1 or columns 0..1.
pub(crate) const GLYPH_ORIGIN: (i32, i32) = (3, 4);
pub(crate) const MAX_SHIFT: i32 = 2;
pub(crate) const CANVAS: usize = 16;

const GLYPHS: [[&str; GLYPH_ROWS]; N_GLYPHS] = [
    [
        "..####..", ".##..##.", "##....##", "##....##", "##....##", "##....##", "##....##", "##....##",
        ".##..##.", "..####..",
    ],
    [
        "...##...", "..###...", ".####...", "...##...", "...##...", "...##...", "...##...", "...##...",
        "...##...", ".######.",
    ],
    [
        ".#####..", "##...##.", ".....##.", ".....##.", "....##..", "...##...", "..##....", ".##.....",
        "##......", "#######.",
    ],
    [
        "######..", ".....##.", ".....##.", "....##..", "..####..", ".....##.", "......##", "......##",
        ".....##.", "######..",
    ],
    [
        "....##..", "...###..", "..#.##..", ".#..##..", "#...##..", "########", "....##..", "....##..",
        "....##..", "....##..",
    ],
    [
        "#######.", "##......", "##......", "######..", ".....##.", "......##", "......##", "......##",
        "##...##.", ".#####..",
    ],
    [
        "..####..", ".##.....", "##......", "##......", "######..", "##...##.", "##....##", "##....##",
        ".##..##.", "..####..",
    ],
    [
        "########", "......##", ".....##.", ".....##.", "....##..", "....##..", "...##...", "...##...",
        "..##....", "..##....",
    ],
    [
        "..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", "##....##", "##....##", "##....##",
        ".##..##.", "..####..",
    ],
    [
        "..####..", ".##..##.", "##....##", "##....##", ".##..###", "..######", "......##", "......##",
        ".....##.", "..####..",
    ],
];

/// 16x16 intensity map (0 or 1) of `digit` translated by `(dy, dx)`.
pub(crate) fn glyph_intensity(digit: usize, dy: i32, dx: i32) -> Vec<f64> {
    let mut out = vec![0.0; CANVAS * CANVAS];
    let (oy, ox) = (GLYPH_ORIGIN.0 + dy, GLYPH_ORIGIN.1 + dx);
    for (r, line) in GLYPHS[digit].iter().enumerate() {
        for (c, ch) in line.bytes().enumerate() {
            if ch == b'#' {
                let (y, x) = (oy + r as i32, ox + c as i32);
                out[y as usize * CANVAS + x as usize] = 1.0;
            }
        }
    }
    out
}
