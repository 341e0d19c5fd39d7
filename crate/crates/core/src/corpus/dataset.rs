use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::towers::TokenBatch;

use super::grammar::{caption, render, Scene, CHANNELS, GRAMMAR_VERSION, GRID, NUM_SCENES, SEQ_LEN};

/// Persistent description of a corpus; everything else is regenerated from it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub grammar_version: u32,
    pub heldout: usize,
}

impl Manifest {
    /// Holds out 100 scenes, or half the corpus when it is smaller than 200.
    pub fn new(seed: u64, count: usize) -> Self {
        Manifest { seed, count, grammar_version: GRAMMAR_VERSION, heldout: (count / 2).min(100) }
    }
}

/// Aligned images and captions; row `i` of both describes scene `ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch<T> {
    /// `[N, CHANNELS, GRID, GRID]`.
    pub images: Tensor<T>,
    pub tokens: TokenBatch,
    pub ids: Vec<usize>,
}

impl<T: Real> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> PairBatch<T> {
        let per = CHANNELS * GRID * GRID;
        let data = self.images.data()[range.start * per..range.end * per].to_vec();
        PairBatch {
            images: Tensor::new(&[range.len(), CHANNELS, GRID, GRID], data).expect("sliced image batch"),
            tokens: self.tokens.slice(range.clone()),
            ids: self.ids[range].to_vec(),
        }
    }

    fn from_pairs(pairs: &[Pair]) -> Self {
        let mut px = Vec::with_capacity(pairs.len() * CHANNELS * GRID * GRID);
        let mut toks = Vec::with_capacity(pairs.len() * SEQ_LEN);
        for p in pairs {
            px.extend(p.pixels.iter().map(|&v| T::c(v)));
            toks.extend_from_slice(&p.tokens);
        }
        PairBatch {
            images: Tensor::new(&[pairs.len(), CHANNELS, GRID, GRID], px).expect("image batch"),
            tokens: TokenBatch::new(toks, pairs.len(), SEQ_LEN).expect("token batch"),
            ids: pairs.iter().map(|p| p.scene.id()).collect(),
        }
    }
}

/// One rendered image with one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub scene: Scene,
    pub pixels: Vec<f64>,
    pub tokens: Vec<u32>,
}

/// Folds a sequence of integers into one RNG seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn render_pair(scene: Scene, seed: u64) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = caption(&scene, rng.random());
    let pixels = render(&scene, &mut rng);
    Pair { scene, pixels, tokens }
}

/// The first `count` scenes of a seed-dependent permutation, each rendered
/// once; pair `i` depends only on `(seed, i)`.
pub fn generate(seed: u64, count: usize) -> Result<Vec<Pair>> {
    Ok(scene_order(seed, count)?.into_iter().enumerate().map(|(i, s)| render_pair(s, derive_seed(&[seed, 0, i as u64]))).collect())
}

fn scene_order(seed: u64, count: usize) -> Result<Vec<Scene>> {
    if count == 0 || count > NUM_SCENES {
        return Err(Error::invalid(format!("corpus count {count} outside 1..={NUM_SCENES} distinct scenes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1]));
    Ok(sample(&mut rng, NUM_SCENES, count).into_iter().map(|id| Scene::from_id(id).expect("id in range")).collect())
}

/// Train and held-out scene splits of one manifest.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    train: Vec<Scene>,
    heldout: Vec<Scene>,
}

impl Corpus {
    pub fn new(manifest: Manifest) -> Result<Self> {
        if manifest.grammar_version != GRAMMAR_VERSION {
            return Err(Error::invalid(format!(
                "corpus grammar version {} unsupported (expected {GRAMMAR_VERSION})",
                manifest.grammar_version
            )));
        }
        let scenes = scene_order(manifest.seed, manifest.count)?;
        if manifest.heldout >= manifest.count {
            return Err(Error::invalid(format!("held-out size {} leaves no training scenes", manifest.heldout)));
        }
        let split = manifest.count - manifest.heldout;
        Ok(Corpus { train: scenes[..split].to_vec(), heldout: scenes[split..].to_vec(), manifest })
    }

    pub fn generate(seed: u64, count: usize) -> Result<Self> {
        Self::new(Manifest::new(seed, count))
    }

    pub fn train_scenes(&self) -> &[Scene] {
        &self.train
    }

    pub fn heldout_scenes(&self) -> &[Scene] {
        &self.heldout
    }

    /// Training batch for `(stream, step)`: `batch` distinct training scenes,
    /// sample `b` rendered from `(seed, stream, step, b)`.
    pub fn train_batch<T: Real>(&self, stream: u64, step: u64, batch: usize) -> Result<PairBatch<T>> {
        if batch < 1 || batch > self.train.len() {
            return Err(Error::invalid(format!("batch {batch} outside 1..={} training scenes", self.train.len())));
        }
        let seed = self.manifest.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 2, stream, step]));
        let pick = sample(&mut rng, self.train.len(), batch);
        let pairs: Vec<Pair> = pick
            .into_iter()
            .enumerate()
            .map(|(b, i)| render_pair(self.train[i], derive_seed(&[seed, 3, stream, step, b as u64])))
            .collect();
        Ok(PairBatch::from_pairs(&pairs))
    }

    /// Every held-out scene rendered once, in split order.
    pub fn heldout_batch<T: Real>(&self) -> PairBatch<T> {
        self.fixed_batch(&self.heldout, 4)
    }

    /// Up to `n` training scenes rendered once, for probes that need more than the held-out set.
    pub fn train_eval_batch<T: Real>(&self, n: usize) -> PairBatch<T> {
        self.fixed_batch(&self.train[..n.min(self.train.len())], 5)
    }

    /// `n` renders cycling through held-out then training scenes, each pass with fresh noise.
    pub fn probe_batch<T: Real>(&self, n: usize) -> PairBatch<T> {
        let seed = self.manifest.seed;
        let all: Vec<Scene> = self.heldout.iter().chain(&self.train).copied().collect();
        let pairs: Vec<Pair> = (0..n).map(|i| render_pair(all[i % all.len()], derive_seed(&[seed, 6, i as u64]))).collect();
        PairBatch::from_pairs(&pairs)
    }

    fn fixed_batch<T: Real>(&self, scenes: &[Scene], tag: u64) -> PairBatch<T> {
        let seed = self.manifest.seed;
        let pairs: Vec<Pair> =
            scenes.iter().enumerate().map(|(i, &s)| render_pair(s, derive_seed(&[seed, tag, i as u64]))).collect();
        PairBatch::from_pairs(&pairs)
    }

    /// Writes `manifest.json` and a readable `captions.txt` listing.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        let mut listing = String::new();
        for (split, scenes) in [("train", &self.train), ("heldout", &self.heldout)] {
            for s in scenes.iter() {
                listing.push_str(&format!("{split}\t{}\t{}\n", s.id(), s.describe()));
            }
        }
        let path = dir.join("captions.txt");
        std::fs::write(&path, listing).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::new(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;
    use crate::corpus::grammar::{parse_caption, parse_image};

    #[test]
    fn generation_is_deterministic_and_unique() {
        let a = generate(7, 50).unwrap();
        assert_eq!(a, generate(7, 50).unwrap());
        let ids: HashSet<usize> = a.iter().map(|p| p.scene.id()).collect();
        assert_eq!(ids.len(), 50);
        let captions: HashSet<Vec<u32>> = generate(7, NUM_SCENES).unwrap().into_iter().map(|p| p.tokens).collect();
        assert_eq!(captions.len(), NUM_SCENES);
        assert!(generate(7, NUM_SCENES + 1).is_err());
        assert!(generate(7, 0).is_err());
    }

    #[test]
    fn pairs_are_aligned() {
        let c = Corpus::generate(3, NUM_SCENES).unwrap();
        let b: PairBatch<f64> = c.train_batch(0, 9, 16).unwrap();
        for i in 0..16 {
            let px = &b.images.data()[i * CHANNELS * GRID * GRID..(i + 1) * CHANNELS * GRID * GRID];
            let scene = parse_image(px).unwrap();
            assert_eq!(scene.id(), b.ids[i]);
            assert_eq!(parse_caption(b.tokens.row(i)), Some(scene));
        }
    }

    #[test]
    fn train_batches_are_deterministic_and_distinct_within_batch() {
        let c = Corpus::generate(3, NUM_SCENES).unwrap();
        let a: PairBatch<f32> = c.train_batch(1, 5, 32).unwrap();
        assert_eq!(a, c.train_batch(1, 5, 32).unwrap());
        assert_ne!(a, c.train_batch(1, 6, 32).unwrap());
        assert_ne!(a, c.train_batch(2, 5, 32).unwrap());
        assert_eq!(a.ids.iter().collect::<HashSet<_>>().len(), 32);
    }

    #[test]
    fn heldout_is_fixed_and_sized() {
        let c = Corpus::generate(3, NUM_SCENES).unwrap();
        let h: PairBatch<f32> = c.heldout_batch();
        assert_eq!(h.len(), 100);
        assert_eq!(h.images.shape(), &[100, 3, 16, 16]);
        assert_eq!(h, c.heldout_batch());
        assert_eq!(Manifest::new(1, 40).heldout, 20);
    }

    #[test]
    fn probe_cycles_scenes_with_fresh_noise() {
        let c = Corpus::generate(3, 40).unwrap();
        let p: PairBatch<f64> = c.probe_batch(90);
        assert_eq!(p.len(), 90);
        let order: Vec<usize> = c.heldout_scenes().iter().chain(c.train_scenes()).map(Scene::id).collect();
        assert!(p.ids.iter().enumerate().all(|(i, &id)| id == order[i % 40]));
        let pixels = CHANNELS * GRID * GRID;
        assert_ne!(p.images.data()[..pixels], p.images.data()[40 * pixels..41 * pixels]);
        assert_eq!(p, c.probe_batch(90));
    }

    #[test]
    fn manifest_roundtrips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::generate(11, 200).unwrap();
        c.save(dir.path()).unwrap();
        let d = Corpus::load(dir.path()).unwrap();
        assert_eq!(d.manifest, c.manifest);
        assert_eq!(d.heldout_scenes(), c.heldout_scenes());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn splits_are_disjoint(seed in any::<u64>(), count in 2usize..=NUM_SCENES) {
            let c = Corpus::generate(seed, count).unwrap();
            let train: HashSet<usize> = c.train_scenes().iter().map(Scene::id).collect();
            let held: HashSet<usize> = c.heldout_scenes().iter().map(Scene::id).collect();
            prop_assert!(train.is_disjoint(&held));
            prop_assert_eq!(train.len() + held.len(), count);
        }
    }
}
