//! Seeded stand-in corpus: composite site+procedure terms, mentions written
//! with synonyms and noise, and a KB whose keys are the surface words.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataBundle;
use crate::corpus::{normalize_delimiters, split_entity, Delimiters, GoldAlignment, Mention, StandardLibrary};
use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, KnowledgeItem, NULL_TOKEN};
use crate::knowledge_encoder::StaticVectors;

pub const SITE_RELATION: &str = "部位";
pub const PROCEDURE_RELATION: &str = "术式";
const PROCEDURE_SUFFIX: char = '术';

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_sites: usize,
    pub n_procedures: usize,
    pub synonyms_per_word: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Probability a mention writes the site with a synonym.
    pub site_substitution: f64,
    pub procedure_substitution: f64,
    /// Probability of inserting one unrelated character.
    pub noise: f64,
    /// Probability of dropping one character.
    pub drop: f64,
    pub one_to_many: f64,
    pub many_to_one: f64,
    pub many_to_many: f64,
    /// Fraction of surface words that receive a KB entry.
    pub kb_coverage: f64,
    pub vector_dim: usize,
    /// Leading dimensions of the static table that carry concept signal.
    pub static_informative_dims: usize,
    pub static_noise: f64,
    pub surface_noise: f64,
    /// Norm of each concept vector.
    pub vector_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_sites: 10,
            n_procedures: 20,
            synonyms_per_word: 20,
            train: 600,
            dev: 150,
            test: 300,
            site_substitution: 0.6,
            procedure_substitution: 0.15,
            noise: 0.1,
            drop: 0.05,
            one_to_many: 0.01,
            many_to_one: 0.05,
            many_to_many: 0.04,
            kb_coverage: 1.0,
            vector_dim: 16,
            static_informative_dims: 4,
            static_noise: 0.5,
            surface_noise: 0.02,
            vector_scale: 4.0,
        }
    }
}

impl SyntheticConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))
    }
}

struct Concept {
    canonical: String,
    synonyms: Vec<String>,
}

impl Concept {
    fn words(&self) -> impl Iterator<Item = &String> {
        std::iter::once(&self.canonical).chain(&self.synonyms)
    }
}

struct Generator<'a> {
    config: &'a SyntheticConfig,
    sites: Vec<Concept>,
    procedures: Vec<Concept>,
    noise_chars: Vec<char>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn term(&self, site: usize, proc: usize) -> String {
        format!("{}{}", self.sites[site].canonical, self.procedures[proc].canonical)
    }

    fn variant(&mut self, concept: &Concept, p: f64) -> String {
        if !concept.synonyms.is_empty() && self.rng.random_bool(p) {
            concept.synonyms[self.rng.random_range(0..concept.synonyms.len())].clone()
        } else {
            concept.canonical.clone()
        }
    }

    fn surface(&mut self, site: usize, procs: &[usize]) -> String {
        let c = self.config;
        let sites = std::mem::take(&mut self.sites);
        let procedures = std::mem::take(&mut self.procedures);
        let mut s = self.variant(&sites[site], c.site_substitution);
        for &p in procs {
            s.push_str(&self.variant(&procedures[p], c.procedure_substitution));
        }
        self.sites = sites;
        self.procedures = procedures;

        let mut chars: Vec<char> = s.chars().collect();
        if chars.len() > 3 && self.rng.random_bool(c.drop) {
            let i = self.rng.random_range(0..chars.len());
            chars.remove(i);
        }
        if !self.noise_chars.is_empty() && self.rng.random_bool(c.noise) {
            let i = self.rng.random_range(0..=chars.len());
            let n = self.noise_chars[self.rng.random_range(0..self.noise_chars.len())];
            chars.insert(i, n);
        }
        chars.into_iter().collect()
    }

    fn separator(&mut self) -> &'static str {
        ["##", "，", "；", "+", "、"][self.rng.random_range(0..5)]
    }

    fn row(&mut self) -> (String, BTreeSet<String>) {
        let c = self.config;
        let (ns, np) = (c.n_sites, c.n_procedures);
        let u: f64 = self.rng.random();
        let site = self.rng.random_range(0..ns);
        let proc = self.rng.random_range(0..np);
        if u < c.one_to_many {
            let other = (proc + self.rng.random_range(1..np.max(2))) % np;
            let raw = self.surface(site, &[proc, other]);
            (raw, [self.term(site, proc), self.term(site, other)].into())
        } else if u < c.one_to_many + c.many_to_one {
            let a = self.surface(site, &[proc]);
            let b = self.surface(site, &[proc]);
            let sep = self.separator();
            (format!("{a}{sep}{b}"), [self.term(site, proc)].into())
        } else if u < c.one_to_many + c.many_to_one + c.many_to_many {
            let site2 = self.rng.random_range(0..ns);
            let proc2 = (proc + self.rng.random_range(1..np.max(2))) % np;
            let a = self.surface(site, &[proc]);
            let b = self.surface(site2, &[proc2]);
            let sep = self.separator();
            (
                format!("{a}{sep}{b}"),
                [self.term(site, proc), self.term(site2, proc2)].into(),
            )
        } else {
            (self.surface(site, &[proc]), [self.term(site, proc)].into())
        }
    }
}

fn char_pool(rng: &mut ChaCha8Rng) -> Vec<char> {
    let reserved: BTreeSet<char> = "是对不没和的意思相同吗在医学术语中从专业角度看与否指代一概念"
        .chars()
        .collect();
    let mut pool: Vec<char> = ('\u{4E00}'..='\u{62FF}')
        .filter(|c| !reserved.contains(c))
        .collect();
    pool.shuffle(rng);
    pool
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// Deterministic corpus for `seed`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<DataBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = char_pool(&mut rng).into_iter();
    let mut word = |len: usize, suffix: Option<char>| -> String {
        let mut s: String = pool.by_ref().take(len).collect();
        s.extend(suffix);
        s
    };
    let mut concept = |suffix: Option<char>| Concept {
        canonical: word(2, suffix),
        synonyms: (0..config.synonyms_per_word).map(|_| word(2, suffix)).collect(),
    };
    let sites: Vec<Concept> = (0..config.n_sites).map(|_| concept(None)).collect();
    let procedures: Vec<Concept> = (0..config.n_procedures)
        .map(|_| concept(Some(PROCEDURE_SUFFIX)))
        .collect();
    let noise_chars: Vec<char> = word(8, None).chars().collect();

    let mut gen = Generator {
        config,
        sites,
        procedures,
        noise_chars,
        rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
    };

    let library = StandardLibrary::new(
        (0..config.n_sites)
            .flat_map(|s| (0..config.n_procedures).map(move |p| (s, p)))
            .map(|(s, p)| gen.term(s, p))
            .collect::<Vec<_>>(),
    );

    let delims = Delimiters::default();
    let split = |n: usize, gen: &mut Generator| -> Result<Vec<GoldAlignment>> {
        (0..n)
            .map(|id| {
                let (raw, gold_parts) = gen.row();
                let normalized = normalize_delimiters(&raw, &delims)?;
                Ok(GoldAlignment {
                    id,
                    mention: Mention {
                        raw,
                        parts: split_entity(&normalized),
                    },
                    gold_parts,
                })
            })
            .collect()
    };
    let train = split(config.train, &mut gen)?;
    let dev = split(config.dev, &mut gen)?;
    let test = split(config.test, &mut gen)?;

    let mut vec_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let dim = config.vector_dim;
    let mut items = Vec::new();
    let mut surface = StaticVectors::new(dim);
    let mut static_table = StaticVectors::new(dim);
    let informative = config.static_informative_dims.min(dim);
    for (concepts, relation) in [(&gen.sites, SITE_RELATION), (&gen.procedures, PROCEDURE_RELATION)] {
        for c in concepts {
            let centre: Vec<f64> = unit_vector(&mut vec_rng, dim)
                .into_iter()
                .map(|x| x * config.vector_scale)
                .collect();
            for w in c.words() {
                if !vec_rng.random_bool(config.kb_coverage) {
                    continue;
                }
                items.push(KnowledgeItem {
                    key: w.clone(),
                    relation: relation.to_string(),
                });
                let noisy: Vec<f64> = centre
                    .iter()
                    .map(|x| x + config.surface_noise * vec_rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                surface.insert(w.clone(), noisy)?;
                let weak: Vec<f64> = (0..dim)
                    .map(|i| {
                        let n = config.static_noise * vec_rng.sample::<f64, _>(rand_distr::StandardNormal);
                        if i < informative {
                            centre[i] + n
                        } else {
                            n
                        }
                    })
                    .collect();
                static_table.insert(w.clone(), weak)?;
            }
        }
    }
    for token in [SITE_RELATION, PROCEDURE_RELATION, NULL_TOKEN] {
        let v: Vec<f64> = unit_vector(&mut vec_rng, dim)
            .into_iter()
            .map(|x| x * config.vector_scale)
            .collect();
        surface.insert(token, v.clone())?;
        static_table.insert(token, v)?;
    }
    let kb = KnowledgeBase::from_items(items);

    Ok(DataBundle {
        library,
        kb,
        train,
        dev,
        test,
        surface: Some(surface),
        static_table: Some(static_table),
    })
}

/// Generate and write the corpus files into `dir`.
pub fn write_synthetic(config: &SyntheticConfig, seed: u64, dir: impl AsRef<Path>) -> Result<DataBundle> {
    let data = generate_synthetic(config, seed)?;
    data.write_dir(dir)?;
    Ok(data)
}
