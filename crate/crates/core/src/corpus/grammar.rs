use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::towers::PAD;

pub const GRAMMAR_VERSION: u32 = 1;
pub const GRID: usize = 16;
pub const CHANNELS: usize = 3;
pub const BOX: usize = 6;
pub const SEQ_LEN: usize = 12;
pub const VOCAB_SIZE: usize = 64;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

/// Background noise amplitude; foreground channels sit within this of 1.
pub const NOISE: f64 = 0.1;

const OFFSETS: [usize; 3] = [0, 5, 10];

/// RGB on/off pattern per color, black excluded.
pub const COLORS: [[bool; 3]; 7] = [
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
    [true, false, true],
    [false, true, true],
    [true, true, true],
];

const SHAPES: [[&str; BOX]; 6] = [
    ["######", "######", "######", "######", "######", "######"],
    ["######", "#....#", "#....#", "#....#", "#....#", "######"],
    ["..##..", "..##..", "######", "######", "..##..", "..##.."],
    ["#....#", ".#..#.", "..##..", "..##..", ".#..#.", "#....#"],
    ["..##..", "..##..", ".####.", ".####.", "######", "######"],
    ["..##..", ".####.", "######", "######", ".####.", "..##.."],
];

const COLOR_WORDS: [[&str; 2]; 7] = [
    ["red", "crimson"],
    ["green", "lime"],
    ["blue", "navy"],
    ["yellow", "gold"],
    ["magenta", "pink"],
    ["cyan", "teal"],
    ["white", "ivory"],
];
const SHAPE_WORDS: [[&str; 2]; 6] = [
    ["square", "block"],
    ["frame", "ring"],
    ["plus", "cross"],
    ["x", "saltire"],
    ["triangle", "wedge"],
    ["diamond", "rhombus"],
];
const ROW_WORDS: [[&str; 2]; 3] = [["top", "upper"], ["middle", "central"], ["bottom", "lower"]];
const COL_WORDS: [[&str; 2]; 3] = [["left", "port"], ["centre", "mid"], ["right", "starboard"]];
const DET_WORDS: [&str; 2] = ["a", "one"];
const PREP_WORDS: [&str; 2] = ["at", "in"];

pub const NUM_SCENES: usize = COLORS.len() * SHAPES.len() * OFFSETS.len() * OFFSETS.len();

/// One latent scene: a colored shape at one of nine positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub color: usize,
    pub shape: usize,
    pub row: usize,
    pub col: usize,
}

impl Scene {
    /// Canonical enumeration index in `0..NUM_SCENES`.
    pub fn id(&self) -> usize {
        ((self.color * SHAPES.len() + self.shape) * 3 + self.row) * 3 + self.col
    }

    pub fn from_id(id: usize) -> Option<Scene> {
        if id >= NUM_SCENES {
            return None;
        }
        Some(Scene { col: id % 3, row: (id / 3) % 3, shape: (id / 9) % SHAPES.len(), color: id / (9 * SHAPES.len()) })
    }

    pub fn describe(&self) -> String {
        format!(
            "{} {} at {} {}",
            COLOR_WORDS[self.color][0], SHAPE_WORDS[self.shape][0], ROW_WORDS[self.row][0], COL_WORDS[self.col][0]
        )
    }
}

fn shape_bit(shape: usize, y: usize, x: usize) -> bool {
    SHAPES[shape][y].as_bytes()[x] == b'#'
}

/// Word list indexed by token id; ids 0..3 are pad, BOS, EOS.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec!["<pad>", "<bos>", "<eos>"];
    v.extend(DET_WORDS);
    v.extend(PREP_WORDS);
    for group in [&COLOR_WORDS[..], &SHAPE_WORDS[..], &ROW_WORDS[..], &COL_WORDS[..]] {
        for w in group {
            v.extend(w);
        }
    }
    v
}

const DET_BASE: u32 = 3;
const PREP_BASE: u32 = DET_BASE + 2;
const COLOR_BASE: u32 = PREP_BASE + 2;
const SHAPE_BASE: u32 = COLOR_BASE + 2 * COLORS.len() as u32;
const ROW_BASE: u32 = SHAPE_BASE + 2 * SHAPES.len() as u32;
const COL_BASE: u32 = ROW_BASE + 6;

/// `BOS det color shape prep row col EOS`, padded with 0 to [`SEQ_LEN`].
/// `synonyms` picks one of two words per slot (bit `k` for slot `k`).
pub fn caption(scene: &Scene, synonyms: u32) -> Vec<u32> {
    let pick = |slot: u32| (synonyms >> slot) & 1;
    let mut t = vec![
        BOS,
        DET_BASE + pick(0),
        COLOR_BASE + 2 * scene.color as u32 + pick(1),
        SHAPE_BASE + 2 * scene.shape as u32 + pick(2),
        PREP_BASE + pick(3),
        ROW_BASE + 2 * scene.row as u32 + pick(4),
        COL_BASE + 2 * scene.col as u32 + pick(5),
        EOS,
    ];
    t.resize(SEQ_LEN, PAD);
    t
}

/// Inverse of [`caption`] for any synonym choice.
pub fn parse_caption(tokens: &[u32]) -> Option<Scene> {
    let content: Vec<u32> = tokens.iter().copied().filter(|&t| t != PAD).collect();
    if content.len() != 8 || content[0] != BOS || content[7] != EOS {
        return None;
    }
    let slot = |t: u32, base: u32, n: usize| (t >= base && t < base + 2 * n as u32).then(|| ((t - base) / 2) as usize);
    slot(content[1], DET_BASE, 1)?;
    slot(content[4], PREP_BASE, 1)?;
    Some(Scene {
        color: slot(content[2], COLOR_BASE, COLORS.len())?,
        shape: slot(content[3], SHAPE_BASE, SHAPES.len())?,
        row: slot(content[5], ROW_BASE, 3)?,
        col: slot(content[6], COL_BASE, 3)?,
    })
}

/// `[CHANNELS, GRID, GRID]` pixels in `[0, 1]`, channel-major.
pub fn render(scene: &Scene, rng: &mut impl Rng) -> Vec<f64> {
    let mut px = vec![0.0; CHANNELS * GRID * GRID];
    let (oy, ox) = (OFFSETS[scene.row], OFFSETS[scene.col]);
    for c in 0..CHANNELS {
        for y in 0..GRID {
            for x in 0..GRID {
                let inside = (oy..oy + BOX).contains(&y) && (ox..ox + BOX).contains(&x);
                let on = inside && COLORS[scene.color][c] && shape_bit(scene.shape, y - oy.min(y), x - ox.min(x));
                let noise = rng.random::<f64>() * NOISE;
                px[(c * GRID + y) * GRID + x] = if on { 1.0 - noise } else { noise };
            }
        }
    }
    px
}

/// Recovers the scene by thresholding pixels at 0.5.
pub fn parse_image(px: &[f64]) -> Option<Scene> {
    if px.len() != CHANNELS * GRID * GRID {
        return None;
    }
    let lit = |c: usize, y: usize, x: usize| px[(c * GRID + y) * GRID + x] > 0.5;
    let channels: [bool; 3] = std::array::from_fn(|c| (0..GRID * GRID).any(|i| lit(c, i / GRID, i % GRID)));
    let color = COLORS.iter().position(|&c| c == channels)?;
    let any = |y: usize, x: usize| (0..CHANNELS).any(|c| lit(c, y, x));
    let oy = (0..GRID).find(|&y| (0..GRID).any(|x| any(y, x)))?;
    let ox = (0..GRID).find(|&x| (0..GRID).any(|y| any(y, x)))?;
    let row = OFFSETS.iter().position(|&o| o == oy)?;
    let col = OFFSETS.iter().position(|&o| o == ox)?;
    let shape = (0..SHAPES.len()).find(|&s| {
        (0..GRID).all(|y| {
            (0..GRID).all(|x| {
                let inside = (oy..oy + BOX).contains(&y) && (ox..ox + BOX).contains(&x);
                any(y, x) == (inside && shape_bit(s, y - oy.min(y), x - ox.min(x)))
            })
        })
    })?;
    Some(Scene { color, shape, row, col })
}
