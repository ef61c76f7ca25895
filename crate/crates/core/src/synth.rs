//! Deterministic synthetic worlds for end-to-end runs on the mock backends.
//!
//! Each image gets a setting and a handful of entities. Images queried about a
//! blind-spot entity hide that entity from the mock model, while the coarse
//! knowledge base holds near-duplicate views of every image whose captions
//! name everything present. Fine entries are close-up crops per entity. Every
//! image carries one positive and one negative existence question.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::mock::{
    hashed_bag_of_words, FixtureImage, FixtureRegion, MockWorld, ENTITIES, MOCK_EMBEDDING_DIM,
};
use crate::domain::{Granularity, KnowledgeEntry};
use crate::error::{Error, Result};
use crate::eval::dataset::{write_binary_dataset, BinaryQARecord, Gold};
use crate::index::write_knowledge_base;

const SETTINGS: [&str; 12] = [
    "kitchen",
    "street",
    "park",
    "beach",
    "office",
    "bedroom",
    "market",
    "station",
    "garden",
    "harbor",
    "farm",
    "classroom",
];
const MOODS: [&str; 8] = ["sunny", "crowded", "quiet", "rainy", "bright", "dim", "busy", "empty"];
const VIEWS: [&str; 6] = ["photo", "shot", "picture", "snapshot", "view", "frame"];
const TEXTURES: [&str; 6] = ["shiny", "worn", "striped", "small", "large", "blurry"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub images: usize,
    /// Fraction of positive questions whose entity is a blind spot.
    pub blind_fraction: f64,
    pub entities_per_image: usize,
    pub near_duplicates: usize,
    pub coarse_distractors: usize,
    pub fine_distractors: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            images: 100,
            blind_fraction: 0.4,
            entities_per_image: 4,
            near_duplicates: 3,
            coarse_distractors: 100,
            fine_distractors: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synth {
    pub world: MockWorld,
    pub coarse_kb: Vec<KnowledgeEntry>,
    pub fine_kb: Vec<KnowledgeEntry>,
    pub dataset: Vec<BinaryQARecord>,
}

pub fn question(entity: &str) -> String {
    format!("Is there a {entity} in the image?")
}

fn scene(setting: &str, mood: &str, entities: &[&str]) -> String {
    let mut words = vec![mood, setting];
    words.extend_from_slice(entities);
    words.join(" ")
}

fn caption(setting: &str, entities: &[&str]) -> String {
    let names: Vec<String> = entities.iter().map(|e| format!("a {e}")).collect();
    match names.split_last() {
        Some((last, rest)) if !rest.is_empty() => format!("a {setting} with {} and {last}", rest.join(", ")),
        Some((last, _)) => format!("a {setting} with {last}"),
        None => format!("a {setting}"),
    }
}

fn entry(id: String, uri: String, descriptor: &str, caption: String, parent: Option<String>) -> Result<KnowledgeEntry> {
    Ok(KnowledgeEntry {
        id,
        image_uri: uri,
        image_embedding: hashed_bag_of_words(descriptor, MOCK_EMBEDDING_DIM)?,
        caption_embedding: hashed_bag_of_words(&caption, MOCK_EMBEDDING_DIM)?,
        caption,
        granularity: if parent.is_some() { Granularity::Fine } else { Granularity::Coarse },
        parent_image_uri: parent,
    })
}

fn crop_descriptor(entity: &str, texture: &str) -> String {
    format!("close up {texture} {entity}")
}

pub fn generate(spec: &SynthSpec) -> Result<Synth> {
    if !(0.0..=1.0).contains(&spec.blind_fraction) {
        return Err(Error::Config(format!("blind_fraction {} outside [0, 1]", spec.blind_fraction)));
    }
    let blind = (spec.blind_fraction * spec.images as f64).round() as usize;
    if spec.entities_per_image < 2 || spec.entities_per_image >= ENTITIES.len() {
        return Err(Error::Config("entities_per_image must be in [2, 49]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..spec.images).collect();
    order.shuffle(&mut rng);
    let blind_images: Vec<bool> = {
        let mut v = vec![false; spec.images];
        for &i in &order[..blind] {
            v[i] = true;
        }
        v
    };

    let mut images = Vec::new();
    let mut coarse_kb = Vec::new();
    let mut fine_kb = Vec::new();
    let mut dataset = Vec::new();
    for (i, &is_blind) in blind_images.iter().enumerate() {
        let uri = format!("img://synth/{i:03}");
        let setting = *SETTINGS.choose(&mut rng).expect("non-empty");
        let mood = *MOODS.choose(&mut rng).expect("non-empty");
        let present: Vec<&str> = ENTITIES.choose_multiple(&mut rng, spec.entities_per_image).copied().collect();
        let target = present[0];
        let (visible, hidden): (Vec<&str>, Vec<&str>) =
            if is_blind { (present[1..].to_vec(), vec![target]) } else { (present.clone(), Vec::new()) };
        let absent = loop {
            let e = *ENTITIES.choose(&mut rng).expect("non-empty");
            if !present.contains(&e) {
                break e;
            }
        };

        let mut regions = Vec::new();
        for &e in &present {
            let texture = *TEXTURES.choose(&mut rng).expect("non-empty");
            let (w, h) = (rng.gen_range(20..200), rng.gen_range(20..200));
            regions.push(FixtureRegion {
                entity: e.to_owned(),
                x: rng.gen_range(0..640 - w),
                y: rng.gen_range(0..480 - h),
                w,
                h,
                crop_descriptor: crop_descriptor(e, texture),
            });
            for d in 0..2 {
                let t = if d == 0 { texture } else { *TEXTURES.choose(&mut rng).expect("non-empty") };
                fine_kb.push(entry(
                    format!("fine-{i:03}-{e}-{d}"),
                    format!("kb://fine/{i:03}/{e}/{d}"),
                    &crop_descriptor(e, t),
                    format!("a close-up photo of a {t} {e}"),
                    Some(format!("kb://coarse/{i:03}/0")),
                )?);
            }
        }

        for d in 0..spec.near_duplicates {
            let view = *VIEWS.choose(&mut rng).expect("non-empty");
            let mut shuffled = present.clone();
            shuffled.shuffle(&mut rng);
            let descriptor = format!("{} {view}", scene(setting, mood, &shuffled));
            coarse_kb.push(entry(
                format!("coarse-{i:03}-{d}"),
                format!("kb://coarse/{i:03}/{d}"),
                &descriptor,
                caption(setting, &shuffled),
                None,
            )?);
        }

        images.push(FixtureImage {
            image_uri: uri.clone(),
            scene_descriptor: scene(setting, mood, &present),
            visible_entities: visible.iter().map(|s| s.to_string()).collect(),
            blind_spot_entities: hidden.iter().map(|s| s.to_string()).collect(),
            regions,
        });
        dataset.push(BinaryQARecord::new(&uri, question(target), Gold::Yes));
        dataset.push(BinaryQARecord::new(&uri, question(absent), Gold::No));
    }

    for d in 0..spec.coarse_distractors {
        let setting = *SETTINGS.choose(&mut rng).expect("non-empty");
        let mood = *MOODS.choose(&mut rng).expect("non-empty");
        let ents: Vec<&str> = ENTITIES.choose_multiple(&mut rng, spec.entities_per_image).copied().collect();
        coarse_kb.push(entry(
            format!("coarse-x{d:03}"),
            format!("kb://coarse/x{d:03}"),
            &scene(setting, mood, &ents),
            caption(setting, &ents),
            None,
        )?);
    }
    for d in 0..spec.fine_distractors {
        let e = *ENTITIES.choose(&mut rng).expect("non-empty");
        let t = *TEXTURES.choose(&mut rng).expect("non-empty");
        fine_kb.push(entry(
            format!("fine-x{d:03}"),
            format!("kb://fine/x{d:03}"),
            &crop_descriptor(e, t),
            format!("a close-up photo of a {t} {e}"),
            Some(format!("kb://coarse/x{d:03}")),
        )?);
    }

    Ok(Synth { world: MockWorld::new(images), coarse_kb, fine_kb, dataset })
}

/// File names written by [`Synth::write`].
pub struct SynthPaths {
    pub fixture: PathBuf,
    pub coarse_kb: PathBuf,
    pub fine_kb: PathBuf,
    pub dataset: PathBuf,
    pub config: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            fixture: dir.join("fixture.jsonl"),
            coarse_kb: dir.join("coarse_kb.jsonl"),
            fine_kb: dir.join("fine_kb.jsonl"),
            dataset: dir.join("pope.jsonl"),
            config: dir.join("engine.conf"),
        }
    }
}

/// Default engine config for a synthetic directory.
pub const SYNTH_CONFIG: &str = "\
# Synthetic mock world.
backend = mock
fixture = fixture.jsonl
coarse_kb = coarse_kb.jsonl
fine_kb = fine_kb.jsonl
embedding_dim = 64
trigger = query
theta = 0.1
";

impl Synth {
    pub fn world(&self) -> Arc<MockWorld> {
        Arc::new(self.world.clone())
    }

    pub fn write(&self, dir: &Path) -> Result<SynthPaths> {
        fs::create_dir_all(dir)?;
        let paths = SynthPaths::in_dir(dir);
        self.world.save(&paths.fixture)?;
        write_knowledge_base(&paths.coarse_kb, &self.coarse_kb)?;
        write_knowledge_base(&paths.fine_kb, &self.fine_kb)?;
        write_binary_dataset(&paths.dataset, &self.dataset)?;
        fs::write(&paths.config, SYNTH_CONFIG)?;
        Ok(paths)
    }
}
