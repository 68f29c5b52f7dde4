//! Synthetic ambiguous image/caption corpus and the affine feature encoders
//! that stand in for pretrained backbones.
//!
//! An image is a bag of `N` region features drawn around `M` object
//! instances, each instance a perturbed copy of one concept from a shared
//! bank. Every caption describes a subset (one instance by default) of its
//! image, so a single image matches several captions that share nothing
//! with one another.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_matrix, write_matrix};
use crate::params::{uniform_matrix, BoundParams, ParamStore};
use crate::predictor::SampleFeatures;
use crate::tensor::{Matrix, Tape, Var};

const CORPUS_MAGIC: &[u8; 4] = b"DIVC";
const CORPUS_VERSION: u32 = 1;
const MAX_CONCEPT_RETRIES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of concepts in the bank.
    pub concepts: usize,
    pub images: usize,
    pub captions_per_image: usize,
    /// Upper bound on concepts per image.
    pub m_max: usize,
    /// Per-coordinate Gaussian noise on every region or token feature.
    pub noise_sigma: f64,
    /// Per-coordinate spread of an object instance around its concept.
    pub instance_sigma: f64,
    /// Image regions `N`.
    pub regions: usize,
    /// Caption tokens `L`.
    pub tokens: usize,
    pub d_raw: usize,
    /// Concepts described by each caption.
    pub caption_concepts: usize,
    /// Maximum pairwise cosine between concepts in the bank.
    pub concept_cos_cap: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            concepts: 32,
            images: 512,
            captions_per_image: 4,
            m_max: 4,
            noise_sigma: 0.1,
            instance_sigma: 0.1,
            regions: 8,
            tokens: 4,
            d_raw: 64,
            caption_concepts: 1,
            concept_cos_cap: 0.3,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("concepts", self.concepts),
            ("images", self.images),
            ("captions_per_image", self.captions_per_image),
            ("m_max", self.m_max),
            ("regions", self.regions),
            ("tokens", self.tokens),
            ("d_raw", self.d_raw),
            ("caption_concepts", self.caption_concepts),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("data.{name} must be at least 1")));
            }
        }
        if self.concepts < self.m_max {
            return Err(Error::Config(format!(
                "data.concepts ({}) must be at least data.m_max ({})",
                self.concepts, self.m_max
            )));
        }
        if self.regions < self.m_max {
            return Err(Error::Config(format!(
                "data.regions ({}) must be at least data.m_max ({})",
                self.regions, self.m_max
            )));
        }
        if self.noise_sigma < 0.0 || self.instance_sigma < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(self.concept_cos_cap > -1.0 && self.concept_cos_cap <= 1.0) {
            return Err(Error::Config("data.concept_cos_cap must lie in (-1, 1]".into()));
        }
        Ok(())
    }
}

/// Unit concept vectors, `C x D_raw`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBank {
    pub vectors: Matrix,
    pub seed: u64,
}

impl ConceptBank {
    /// Rejection-samples unit vectors until every pairwise cosine is below `cap`.
    pub fn generate(count: usize, dim: usize, cap: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
        while rows.len() < count {
            let mut accepted = false;
            for _ in 0..MAX_CONCEPT_RETRIES {
                let v = unit_gaussian(rng, dim);
                if rows.iter().all(|r| crate::tensor::ops::dot(r, &v) < cap) {
                    rows.push(v);
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                return Err(Error::Config(format!(
                    "cannot place {count} concepts in {dim} dimensions with cosine cap {cap} \
                     (stuck at {} after {MAX_CONCEPT_RETRIES} draws)",
                    rows.len()
                )));
            }
        }
        Ok(ConceptBank {
            vectors: Matrix::from_rows(&rows).round_to_f32(),
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }
}

fn unit_gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::tensor::ops::dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn gaussian_noise<R: Rng>(rng: &mut R, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sigma * { let z: f64 = StandardNormal.sample(rng); z })
        .collect()
}

/// Raw local and global features of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures {
    /// `N x D_raw` (images) or `L x D_raw` (captions).
    pub local: Matrix,
    /// `1 x D_raw`, the mean of the local rows.
    pub global: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCaption {
    pub caption_id: u32,
    pub concept_subset: Vec<usize>,
    pub features: RawFeatures,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image_id: u32,
    pub concept_ids: Vec<usize>,
    pub features: RawFeatures,
    pub captions: Vec<SynthCaption>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: DataConfig,
    pub bank: ConceptBank,
    pub samples: Vec<SynthSample>,
}

fn mean_row(m: &Matrix) -> Matrix {
    m.col_sums().scale(1.0 / m.rows() as f64)
}

/// Deterministically generates a corpus from `cfg.seed`.
pub fn generate_corpus(cfg: &DataConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bank = ConceptBank::generate(cfg.concepts, cfg.d_raw, cfg.concept_cos_cap, &mut rng)?;
    bank.seed = cfg.seed;
    let d = cfg.d_raw;

    let mut samples = Vec::with_capacity(cfg.images);
    let all: Vec<usize> = (0..cfg.concepts).collect();
    for image in 0..cfg.images {
        let m = rng.random_range(1..=cfg.m_max);
        let concept_ids: Vec<usize> = all.choose_multiple(&mut rng, m).copied().collect();
        let instances: Vec<Vec<f64>> = concept_ids
            .iter()
            .map(|&c| {
                let noise = gaussian_noise(&mut rng, d, cfg.instance_sigma);
                bank.vectors
                    .row(c)
                    .iter()
                    .zip(noise)
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();

        // every instance gets at least one region, the rest are spread at random
        let mut assignment: Vec<usize> = (0..m).collect();
        assignment.extend((m..cfg.regions).map(|_| rng.random_range(0..m)));
        assignment.shuffle(&mut rng);
        let local = features_around(&instances, &assignment, cfg.noise_sigma, &mut rng);

        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let subset_size = cfg.caption_concepts.min(m);
        let mut captions = Vec::with_capacity(cfg.captions_per_image);
        for j in 0..cfg.captions_per_image {
            let members: Vec<usize> = (0..subset_size)
                .map(|t| order[(j * subset_size + t) % m])
                .collect();
            let token_assignment: Vec<usize> =
                (0..cfg.tokens).map(|t| members[t % members.len()]).collect();
            let tokens = features_around(&instances, &token_assignment, cfg.noise_sigma, &mut rng);
            captions.push(SynthCaption {
                caption_id: (image * cfg.captions_per_image + j) as u32,
                concept_subset: members.iter().map(|&i| concept_ids[i]).collect(),
                features: RawFeatures {
                    global: mean_row(&tokens).round_to_f32(),
                    local: tokens,
                },
            });
        }
        samples.push(SynthSample {
            image_id: image as u32,
            concept_ids,
            features: RawFeatures {
                global: mean_row(&local).round_to_f32(),
                local,
            },
            captions,
        });
    }
    Ok(Corpus {
        config: cfg.clone(),
        bank,
        samples,
    })
}

fn features_around<R: Rng>(
    instances: &[Vec<f64>],
    assignment: &[usize],
    sigma: f64,
    rng: &mut R,
) -> Matrix {
    let d = instances[0].len();
    let rows: Vec<Vec<f64>> = assignment
        .iter()
        .map(|&i| {
            let noise = gaussian_noise(rng, d, sigma);
            instances[i].iter().zip(noise).map(|(a, b)| a + b).collect()
        })
        .collect();
    Matrix::from_rows(&rows).round_to_f32()
}

/// Image/caption correspondence of a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchTable {
    /// For each caption, the index of its image.
    pub caption_image: Vec<usize>,
    /// For each image, the indices of its captions.
    pub image_captions: Vec<Vec<usize>>,
}

impl MatchTable {
    pub fn new(caption_image: Vec<usize>, images: usize) -> Result<Self> {
        let mut image_captions = vec![Vec::new(); images];
        for (c, &i) in caption_image.iter().enumerate() {
            image_captions
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("caption {c} maps to missing image {i}")))?
                .push(c);
        }
        if let Some(i) = image_captions.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("image {i} has no caption")));
        }
        Ok(MatchTable {
            caption_image,
            image_captions,
        })
    }

    pub fn images(&self) -> usize {
        self.image_captions.len()
    }

    pub fn captions(&self) -> usize {
        self.caption_image.len()
    }
}

impl Corpus {
    pub fn caption_count(&self) -> usize {
        self.samples.iter().map(|s| s.captions.len()).sum()
    }

    /// Match table restricted to the given images, captions in image order.
    pub fn match_table(&self, images: &[usize]) -> MatchTable {
        let mut caption_image = Vec::new();
        for (local, &i) in images.iter().enumerate() {
            caption_image.extend(std::iter::repeat_n(local, self.samples[i].captions.len()));
        }
        MatchTable::new(caption_image, images.len()).expect("every synthetic image has a caption")
    }

    /// Raw caption features for the given images, in image order.
    pub fn captions_of<'a>(&'a self, images: &'a [usize]) -> impl Iterator<Item = &'a SynthCaption> {
        images
            .iter()
            .flat_map(move |&i| self.samples[i].captions.iter())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Corpus> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Corpus::read(&mut std::io::BufReader::new(file))
    }

    /// `DIVC`, u32 version, u32 header length, JSON header, then `DIVM`
    /// blobs: the concept bank, and for every image its local and global
    /// features followed by those of each caption.
    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = CorpusHeader {
            version: CORPUS_VERSION,
            config: self.config.clone(),
            images: self
                .samples
                .iter()
                .map(|s| ImageEntry {
                    image_id: s.image_id,
                    concept_ids: s.concept_ids.clone(),
                    captions: s
                        .captions
                        .iter()
                        .map(|c| CaptionEntry {
                            caption_id: c.caption_id,
                            concept_subset: c.concept_subset.clone(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        w.write_all(CORPUS_MAGIC)?;
        w.write_all(&CORPUS_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        write_matrix(w, &self.bank.vectors)?;
        for s in &self.samples {
            write_matrix(w, &s.features.local)?;
            write_matrix(w, &s.features.global)?;
            for c in &s.captions {
                write_matrix(w, &c.features.local)?;
                write_matrix(w, &c.features.global)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Corpus> {
        let io = |e: std::io::Error| Error::format("corpus", e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CORPUS_MAGIC {
            return Err(Error::format("corpus", "bad magic"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != CORPUS_VERSION {
            return Err(Error::format("corpus", format!("unsupported version {version}")));
        }
        r.read_exact(&mut word).map_err(io)?;
        let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut json).map_err(io)?;
        let header: CorpusHeader =
            serde_json::from_slice(&json).map_err(|e| Error::format("corpus header", e.to_string()))?;
        let bank = ConceptBank {
            vectors: read_matrix(r)?,
            seed: header.config.seed,
        };
        let mut samples = Vec::with_capacity(header.images.len());
        for img in header.images {
            let features = RawFeatures {
                local: read_matrix(r)?,
                global: read_matrix(r)?,
            };
            let mut captions = Vec::with_capacity(img.captions.len());
            for c in img.captions {
                captions.push(SynthCaption {
                    caption_id: c.caption_id,
                    concept_subset: c.concept_subset,
                    features: RawFeatures {
                        local: read_matrix(r)?,
                        global: read_matrix(r)?,
                    },
                });
            }
            samples.push(SynthSample {
                image_id: img.image_id,
                concept_ids: img.concept_ids,
                features,
                captions,
            });
        }
        Ok(Corpus {
            config: header.config,
            bank,
            samples,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    version: u32,
    config: DataConfig,
    images: Vec<ImageEntry>,
}

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    image_id: u32,
    concept_ids: Vec<usize>,
    captions: Vec<CaptionEntry>,
}

#[derive(Serialize, Deserialize)]
struct CaptionEntry {
    caption_id: u32,
    concept_subset: Vec<usize>,
}

/// Image indices of the train / validation / test partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of the images into train, validation and test parts.
pub fn split_images(images: usize, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Splits> {
    if !(0.0..1.0).contains(&val_fraction)
        || !(0.0..1.0).contains(&test_fraction)
        || val_fraction + test_fraction >= 1.0
    {
        return Err(Error::Config(format!(
            "split fractions {val_fraction} + {test_fraction} leave no training data"
        )));
    }
    let mut order: Vec<usize> = (0..images).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5_1117));
    let n_val = ((images as f64) * val_fraction).round() as usize;
    let n_test = ((images as f64) * test_fraction).round() as usize;
    if n_val + n_test >= images {
        return Err(Error::Config(format!("{images} images are too few to split")));
    }
    let mut val = order[..n_val].to_vec();
    let mut test = order[n_val..n_val + n_test].to_vec();
    let mut train = order[n_val + n_test..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Splits { train, val, test })
}

/// Affine maps `D_raw -> D` for the local rows and the global feature of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams(pub ParamStore);

pub fn encoder_layout(d_raw: usize, d: usize) -> [(&'static str, (usize, usize)); 4] {
    [
        ("local.w", (d_raw, d)),
        ("local.b", (1, d)),
        ("global.w", (d_raw, d)),
        ("global.b", (1, d)),
    ]
}

impl EncoderParams {
    pub fn init<R: Rng>(d_raw: usize, d: usize, rng: &mut R) -> EncoderParams {
        let mut store = ParamStore::new();
        for (name, (r, c)) in encoder_layout(d_raw, d) {
            let m = if name.ends_with(".w") {
                uniform_matrix(rng, r, c, 1.0 / (r as f64).sqrt())
            } else {
                Matrix::zeros(r, c)
            };
            store.insert(name, m);
        }
        EncoderParams(store)
    }

    /// Identity weights and zero biases; requires `d_raw == d`.
    pub fn identity(d: usize) -> EncoderParams {
        let mut store = ParamStore::new();
        for (name, (r, c)) in encoder_layout(d, d) {
            let m = if name.ends_with(".w") {
                Matrix::identity(d)
            } else {
                Matrix::zeros(r, c)
            };
            store.insert(name, m);
        }
        EncoderParams(store)
    }

    pub fn zeros(d_raw: usize, d: usize) -> EncoderParams {
        let mut store = ParamStore::new();
        for (name, (r, c)) in encoder_layout(d_raw, d) {
            store.insert(name, Matrix::zeros(r, c));
        }
        EncoderParams(store)
    }
}

/// Records the encoder on a tape; returns `(local, global)` feature values.
pub fn encode_on_tape(
    tape: &mut Tape,
    params: &BoundParams,
    raw_local: Var,
    raw_global: Var,
) -> Result<(Var, Var)> {
    let l = tape.matmul(raw_local, params.var("local.w")?)?;
    let l = tape.add_row(l, params.var("local.b")?)?;
    let g = tape.matmul(raw_global, params.var("global.w")?)?;
    let g = tape.add_row(g, params.var("global.b")?)?;
    Ok((l, g))
}

/// Applies the encoder to raw features.
pub fn encode(raw: &RawFeatures, params: &EncoderParams) -> Result<SampleFeatures> {
    let mut tape = Tape::new();
    let bound = params.0.bind_frozen(&mut tape);
    let l = tape.constant(raw.local.clone());
    let g = tape.constant(raw.global.clone());
    let (l, g) = encode_on_tape(&mut tape, &bound, l, g)?;
    SampleFeatures::new(tape.value(l).clone(), tape.value(g).clone())
}
