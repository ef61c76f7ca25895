//! Deterministic mock backends driven by a fixture file.
//!
//! Each fixture image lists the entities the mock model can see, the
//! entities that are present but that the model is blind to, and grounded
//! regions. The mock model answers an existence question "yes" iff the
//! entity is visible or is mentioned by a retrieved caption in the context,
//! so retrieval measurably helps on blind spots and can hurt on absent
//! entities that a neighbour's caption happens to mention.
//!
//! Everything is derived from SHA-256 of the inputs, so outputs are
//! bit-identical across runs and platforms.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    greedy_generate, teacher_forced_score, BackendDescriptor, Concurrency, Embedder, GenerationContext, Grounder, Lvlm,
};
use crate::domain::{l2_normalize, AnswerTrace, EmbeddingVector, Region, Token, TokenDistribution, TokenId};
use crate::error::{Error, Result};
use crate::fusion::prompt::{render, PromptPart, INSTANCE_IMAGE, QUERY_LEAD};

pub const MOCK_EMBEDDING_DIM: usize = 64;

/// Probability mass spread uniformly over the whole vocabulary at every step.
const REST_MASS: f64 = 0.04;
const DEFAULT_PART_BUDGET: usize = 24;

const SPECIAL_TOKENS: [&str; 7] = ["<eos>", "yes", "no", "a", "photo", "of", "and"];
pub const EOS: TokenId = TokenId(0);
pub const YES: TokenId = TokenId(1);
pub const NO: TokenId = TokenId(2);

/// Object categories the mock model knows about.
pub const ENTITIES: [&str; 50] = [
    "person",
    "bicycle",
    "car",
    "motorcycle",
    "airplane",
    "bus",
    "train",
    "truck",
    "boat",
    "bench",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "elephant",
    "bear",
    "zebra",
    "giraffe",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
    "frisbee",
    "laptop",
    "vase",
    "kite",
    "skateboard",
    "surfboard",
    "bottle",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "pizza",
    "donut",
    "cake",
    "chair",
    "couch",
    "bed",
    "clock",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRegion {
    pub entity: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub crop_descriptor: String,
}

impl FixtureRegion {
    pub fn region(&self) -> Region {
        Region { x: self.x, y: self.y, w: self.w, h: self.h, entity: self.entity.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureImage {
    pub image_uri: String,
    pub scene_descriptor: String,
    pub visible_entities: Vec<String>,
    pub blind_spot_entities: Vec<String>,
    #[serde(default)]
    pub regions: Vec<FixtureRegion>,
}

/// All fixture images, keyed by URI.
#[derive(Debug, Clone, Default)]
pub struct MockWorld {
    images: BTreeMap<String, FixtureImage>,
}

impl MockWorld {
    pub fn new(images: impl IntoIterator<Item = FixtureImage>) -> Self {
        Self { images: images.into_iter().map(|i| (i.image_uri.clone(), i)).collect() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut images = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let img: FixtureImage =
                serde_json::from_str(line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
            images.push(img);
        }
        Ok(Self::new(images))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for img in self.images.values() {
            out.push_str(&serde_json::to_string(img).map_err(|e| Error::Parse(e.to_string()))?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn image(&self, uri: &str) -> Result<&FixtureImage> {
        self.images.get(uri).ok_or_else(|| Error::UnknownImage(uri.to_owned()))
    }

    pub fn images(&self) -> impl Iterator<Item = &FixtureImage> {
        self.images.values()
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(|w| w.to_lowercase())
}

fn mentions(text: &str, entity: &str) -> bool {
    let plural = format!("{entity}s");
    words(text).any(|w| w == entity || w == plural)
}

/// Known entities in `text`, in order of first mention.
pub fn find_entities(text: &str) -> Vec<String> {
    let mut found: Vec<String> = Vec::new();
    for w in words(text) {
        let stem = w.strip_suffix('s').filter(|s| ENTITIES.contains(s)).unwrap_or(&w);
        if ENTITIES.contains(&stem) && !found.iter().any(|f| f == stem) {
            found.push(stem.to_owned());
        }
    }
    found
}

fn digest(parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0x1f]);
    }
    h.finalize().into()
}

/// Deterministic value in `[0, 1)`.
fn unit(parts: &[&str]) -> f64 {
    let d = digest(parts);
    let bits = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Language-prior probability of "yes" for an entity, without any image.
pub fn prior_yes(entity: &str) -> f64 {
    0.25 + 0.2 * unit(&["prior", entity])
}

pub fn mock_vocabulary() -> Vec<String> {
    SPECIAL_TOKENS.iter().chain(ENTITIES.iter()).map(|s| s.to_string()).collect()
}

/// What the mock reads out of a context.
struct Reading<'a> {
    image: Option<(&'a str, Option<&'a Region>)>,
    query: String,
    evidence: String,
}

fn strip_instance_phrase(text: &str) -> String {
    let Some(end) = text.find(INSTANCE_IMAGE) else { return text.to_owned() };
    let lead = " similar to the ";
    match text[..end].rfind(lead) {
        Some(start) => format!("{}{}", &text[..start], &text[end + INSTANCE_IMAGE.len()..]),
        None => text.to_owned(),
    }
}

fn read_context(ctx: &GenerationContext) -> Reading<'_> {
    let mut image = None;
    let mut texts: Vec<&str> = Vec::new();
    let mut captions: Vec<&str> = Vec::new();
    for part in &ctx.parts {
        match part {
            PromptPart::Text { text } => texts.push(text),
            PromptPart::ImageRef { image_uri, region } => image = Some((image_uri.as_str(), region.as_ref())),
            PromptPart::PairBlock { pairs, .. } => captions.extend(pairs.iter().map(|p| p.caption.as_str())),
        }
    }
    if !ctx.image_included {
        image = None;
    }
    let mut query = String::new();
    let mut evidence = String::new();
    if let Some((last, rest)) = texts.split_last() {
        let trimmed_lead = QUERY_LEAD.trim_start_matches('.').trim_start();
        match last.rfind(trimmed_lead) {
            Some(at) => {
                query = last[at + trimmed_lead.len()..].to_owned();
                evidence.push_str(&last[..at]);
            }
            None => query = (*last).to_owned(),
        }
        for t in rest {
            evidence.push(' ');
            evidence.push_str(t);
        }
    }
    let mut evidence = strip_instance_phrase(&evidence);
    for c in captions {
        evidence.push(' ');
        evidence.push_str(c);
    }
    Reading { image, query, evidence }
}

enum Task {
    Describe(Vec<String>),
    Exists(Option<String>),
}

/// Mock vision-language model.
pub struct MockLvlm {
    world: Arc<MockWorld>,
    descriptor: BackendDescriptor,
    part_budget: usize,
    scripts: HashMap<String, Vec<(TokenId, f64)>>,
}

impl MockLvlm {
    pub fn new(world: Arc<MockWorld>) -> Self {
        Self {
            world,
            descriptor: BackendDescriptor {
                name: "mock-lvlm".into(),
                vocabulary: mock_vocabulary(),
                eos_token: EOS,
                supports_multi_image: true,
                concurrency: Concurrency::Reentrant,
            },
            part_budget: DEFAULT_PART_BUDGET,
            scripts: HashMap::new(),
        }
    }

    pub fn with_part_budget(mut self, budget: usize) -> Self {
        self.part_budget = budget;
        self
    }

    pub fn with_multi_image(mut self, supported: bool) -> Self {
        self.descriptor.supports_multi_image = supported;
        self
    }

    /// Pins the answer for one exact prompt (matched on its rendered text).
    pub fn with_script(mut self, parts: &[PromptPart], answer: &[(&str, f64)]) -> Result<Self> {
        let mut steps = Vec::with_capacity(answer.len());
        for &(surface, p) in answer {
            let id = self.token_id(surface)?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("scripted probability {p} outside (0, 1]")));
            }
            steps.push((id, p));
        }
        self.scripts.insert(render(parts), steps);
        Ok(self)
    }

    fn token_id(&self, surface: &str) -> Result<TokenId> {
        self.descriptor
            .vocabulary
            .iter()
            .position(|v| v == surface)
            .map(TokenId)
            .ok_or_else(|| Error::Config(format!("'{surface}' is not in the mock vocabulary")))
    }

    fn vocab_size(&self) -> usize {
        self.descriptor.vocabulary.len()
    }

    fn check_context(&self, ctx: &GenerationContext) -> Result<()> {
        ctx.validate()?;
        let parts: usize = ctx
            .parts
            .iter()
            .map(|p| match p {
                PromptPart::PairBlock { pairs, .. } => pairs.len().max(1),
                _ => 1,
            })
            .sum();
        if parts > self.part_budget {
            return Err(Error::UnsupportedContext(format!("{parts} parts exceed budget of {}", self.part_budget)));
        }
        if ctx.has_retrieved_images() && !self.descriptor.supports_multi_image {
            return Err(Error::UnsupportedContext("backend does not accept multiple images".into()));
        }
        Ok(())
    }

    /// Everything mass on `id` except the shared rest mass.
    fn peaked(&self, id: TokenId) -> Vec<f64> {
        let v = self.vocab_size() as f64;
        let mut probs = vec![REST_MASS / v; self.vocab_size()];
        probs[id.0] += 1.0 - REST_MASS;
        probs
    }

    fn yes_no(&self, p_yes: f64) -> Vec<f64> {
        let v = self.vocab_size() as f64;
        let mut probs = vec![REST_MASS / v; self.vocab_size()];
        probs[YES.0] += (1.0 - REST_MASS) * p_yes;
        probs[NO.0] += (1.0 - REST_MASS) * (1.0 - p_yes);
        probs
    }

    fn scripted(&self, steps: &[(TokenId, f64)], prefix: &[Token]) -> Vec<f64> {
        let on_script = prefix.len() < steps.len() && prefix.iter().zip(steps).all(|(t, (id, _))| t.id == *id);
        if !on_script {
            return self.peaked(EOS);
        }
        let (id, p) = steps[prefix.len()];
        let others = (1.0 - p) / (self.vocab_size() - 1) as f64;
        let mut probs = vec![others; self.vocab_size()];
        probs[id.0] = p;
        probs
    }

    fn task(&self, reading: &Reading<'_>) -> Result<Task> {
        if words(&reading.query).any(|w| w == "describe") {
            let visible: Vec<String> = match reading.image {
                None => Vec::new(),
                Some((uri, region)) => {
                    let img = self.world.image(uri)?;
                    match region {
                        Some(r) if img.visible_entities.contains(&r.entity) => vec![r.entity.clone()],
                        Some(_) => Vec::new(),
                        None => img.visible_entities.clone(),
                    }
                }
            };
            let mut caption: Vec<String> = ["a", "photo"].map(String::from).to_vec();
            for (i, e) in visible.into_iter().enumerate() {
                caption.push(if i == 0 { "of" } else { "and" }.to_owned());
                caption.push(e);
            }
            return Ok(Task::Describe(caption));
        }
        Ok(Task::Exists(find_entities(&reading.query).into_iter().next()))
    }

    fn p_yes(&self, reading: &Reading<'_>, entity: &str) -> Result<f64> {
        if mentions(&reading.evidence, entity) {
            let key = reading.image.map_or("", |(u, _)| u);
            return Ok(0.90 + 0.08 * unit(&["evidence", key, entity]));
        }
        let prior = prior_yes(entity);
        let Some((uri, _)) = reading.image else { return Ok(prior) };
        let img = self.world.image(uri)?;
        let u = unit(&["confidence", uri, entity]);
        let has = |list: &[String]| list.iter().any(|e| e == entity);
        Ok(if has(&img.visible_entities) {
            0.80 + 0.15 * u
        } else if has(&img.blind_spot_entities) {
            // No visual evidence: the answer stays close to the language prior.
            1.0 - (1.0 - prior) * (0.08 * u - 0.04).exp()
        } else {
            1.0 - (0.85 + 0.12 * u)
        })
    }

    fn base_distribution(&self, ctx: &GenerationContext, prefix: &[Token]) -> Result<Vec<f64>> {
        if let Some(steps) = self.scripts.get(&render(&ctx.parts)) {
            return Ok(self.scripted(steps, prefix));
        }
        let reading = read_context(ctx);
        match self.task(&reading)? {
            Task::Describe(caption) => {
                let ids: Vec<(TokenId, f64)> =
                    caption.iter().map(|w| self.token_id(w).map(|id| (id, 0.0))).collect::<Result<_>>()?;
                let on_script = prefix.len() < ids.len() && prefix.iter().zip(&ids).all(|(t, (id, _))| t.id == *id);
                Ok(self.peaked(if on_script { ids[prefix.len()].0 } else { EOS }))
            }
            Task::Exists(_) if !prefix.is_empty() => Ok(self.peaked(EOS)),
            Task::Exists(None) => Ok(self.yes_no(0.45)),
            Task::Exists(Some(entity)) => Ok(self.yes_no(self.p_yes(&reading, &entity)?)),
        }
    }
}

impl Lvlm for MockLvlm {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate(&self, ctx: &GenerationContext, max_tokens: usize) -> Result<AnswerTrace> {
        greedy_generate(self, ctx, max_tokens)
    }

    fn score(&self, ctx: &GenerationContext, answer: &[Token]) -> Result<Vec<f64>> {
        teacher_forced_score(self, ctx, answer)
    }

    fn next_distribution(&self, ctx: &GenerationContext, prefix: &[Token]) -> Result<TokenDistribution> {
        self.check_context(ctx)?;
        let mut probs = self.base_distribution(ctx, prefix)?;
        if ctx.distortion_level > 0.0 {
            // Distortion mixes toward uniform: level 1 gives 0.5 p + 0.5 / V.
            let w = ctx.distortion_level / 2.0;
            let u = 1.0 / probs.len() as f64;
            for p in &mut probs {
                *p = (1.0 - w) * *p + w * u;
            }
        }
        TokenDistribution::new(probs)
    }
}

/// Signed feature-hashing bag of words.
pub fn hashed_bag_of_words(text: &str, dim: usize) -> Result<EmbeddingVector> {
    let mut v = vec![0.0; dim];
    for w in words(text) {
        let d = digest(&["bow", &w]);
        let bucket = (u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % dim as u64) as usize;
        v[bucket] += if d[8] & 1 == 0 { 1.0 } else { -1.0 };
    }
    l2_normalize(&EmbeddingVector::new(v)?)
}

/// Mock embedding provider: image embeddings are the bag-of-words embedding
/// of the fixture's scene (or crop) descriptor.
pub struct MockEmbedder {
    world: Arc<MockWorld>,
    dim: usize,
    available: AtomicBool,
}

impl MockEmbedder {
    pub fn new(world: Arc<MockWorld>) -> Self {
        Self { world, dim: MOCK_EMBEDDING_DIM, available: AtomicBool::new(true) }
    }

    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::SeqCst);
    }

    fn check(&self) -> Result<()> {
        if self.available.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(Error::ProviderUnavailable("mock embedder is offline".into()))
        }
    }
}

impl Embedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.check()?;
        hashed_bag_of_words(text, self.dim)
    }

    fn embed_image(&self, image_uri: &str, region: Option<&Region>) -> Result<EmbeddingVector> {
        self.check()?;
        let img = self.world.image(image_uri)?;
        let descriptor = match region {
            None => &img.scene_descriptor,
            Some(r) => {
                &img.regions
                    .iter()
                    .find(|f| f.region() == *r)
                    .ok_or_else(|| Error::UnknownImage(format!("{image_uri}#{}", r.entity)))?
                    .crop_descriptor
            }
        };
        hashed_bag_of_words(descriptor, self.dim)
    }
}

/// Mock entity extractor and grounder reading fixture annotations.
pub struct MockGrounder {
    world: Arc<MockWorld>,
    available: AtomicBool,
}

impl MockGrounder {
    pub fn new(world: Arc<MockWorld>) -> Self {
        Self { world, available: AtomicBool::new(true) }
    }

    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::SeqCst);
    }

    fn check(&self) -> Result<()> {
        if self.available.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(Error::ProviderUnavailable("mock grounder is offline".into()))
        }
    }
}

impl Grounder for MockGrounder {
    fn extract_entities(&self, query: &str) -> Result<Vec<String>> {
        self.check()?;
        Ok(find_entities(query))
    }

    fn ground(&self, image_uri: &str, entity: &str) -> Result<Option<Region>> {
        self.check()?;
        let img = self.world.image(image_uri)?;
        Ok(img.regions.iter().find(|r| r.entity == entity).map(FixtureRegion::region))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::cosine_similarity;
    use crate::fusion::prompt::{Augmentation, RetrievedPair};

    fn world() -> Arc<MockWorld> {
        Arc::new(MockWorld::new([
            FixtureImage {
                image_uri: "img://a".into(),
                scene_descriptor: "kitchen table cup clock wall".into(),
                visible_entities: vec!["cup".into()],
                blind_spot_entities: vec!["clock".into()],
                regions: vec![
                    FixtureRegion {
                        entity: "clock".into(),
                        x: 10,
                        y: 5,
                        w: 30,
                        h: 30,
                        crop_descriptor: "round wall clock".into(),
                    },
                    FixtureRegion {
                        entity: "cup".into(),
                        x: 50,
                        y: 60,
                        w: 10,
                        h: 12,
                        crop_descriptor: "white cup".into(),
                    },
                ],
            },
            FixtureImage {
                image_uri: "img://b".into(),
                scene_descriptor: "street bus car".into(),
                visible_entities: vec!["bus".into(), "car".into()],
                blind_spot_entities: vec![],
                regions: vec![],
            },
        ]))
    }

    fn plain(uri: &str, q: &str) -> GenerationContext {
        GenerationContext::with_image(vec![PromptPart::image(uri), PromptPart::text(q)])
    }

    #[test]
    fn scripted_answer() {
        let ctx = plain("img://a", "Is there a clock?");
        let lvlm = MockLvlm::new(world()).with_script(&ctx.parts, &[("no", 0.62)]).unwrap();
        let trace = lvlm.generate(&ctx, 4).unwrap();
        assert_eq!(trace.text(), "no");
        assert_eq!(trace.token_probs, vec![0.62]);
    }

    #[test]
    fn blind_spot_says_no_until_a_caption_mentions_it() {
        let lvlm = MockLvlm::new(world());
        let trace = lvlm.generate(&plain("img://a", "Is there a clock?"), 4).unwrap();
        assert_eq!(trace.text(), "no");
        assert!(trace.token_probs[0] > 0.5 && trace.token_probs[0] < 0.8);

        let with_caption = GenerationContext::with_image(vec![
            PromptPart::text("Here are the image-caption pairs similar to the test image: a clock on a wall"),
            PromptPart::image("img://a"),
            PromptPart::text(". Answer this question: Is there a clock?"),
        ]);
        assert_eq!(lvlm.generate(&with_caption, 4).unwrap().text(), "yes");

        let pair_block = GenerationContext::with_image(vec![
            PromptPart::PairBlock {
                pairs: vec![RetrievedPair {
                    id: "k".into(),
                    image_uri: "kb://k".into(),
                    caption: "two clocks".into(),
                    score: 0.9,
                }],
                augmentation: Augmentation::ImageAndText,
            },
            PromptPart::image("img://a"),
            PromptPart::text(". Answer this question: Is there a clock?"),
        ]);
        assert_eq!(lvlm.generate(&pair_block, 4).unwrap().text(), "yes");
        let single = MockLvlm::new(world()).with_multi_image(false);
        assert!(matches!(single.generate(&pair_block, 4), Err(Error::UnsupportedContext(_))));
    }

    #[test]
    fn instance_phrase_is_not_evidence() {
        let lvlm = MockLvlm::new(world());
        let ctx = GenerationContext::with_image(vec![
            PromptPart::text(
                "Here are the image-caption pairs similar to the test image: a kitchen. Here are the image-caption \
                 pairs: a mug similar to the clock in the input image. Based on these pairs and this input image: ",
            ),
            PromptPart::image("img://a"),
            PromptPart::text(". Answer this question: Is there a clock?."),
        ]);
        assert_eq!(lvlm.generate(&ctx, 4).unwrap().text(), "no");
    }

    #[test]
    fn visible_and_absent_entities() {
        let lvlm = MockLvlm::new(world());
        assert_eq!(lvlm.generate(&plain("img://a", "Is there a cup in the image?"), 4).unwrap().text(), "yes");
        assert_eq!(lvlm.generate(&plain("img://a", "Is there a zebra?"), 4).unwrap().text(), "no");
        assert!(matches!(lvlm.generate(&plain("img://zzz", "Is there a cup?"), 4), Err(Error::UnknownImage(_))));
    }

    #[test]
    fn part_budget_enforced() {
        let lvlm = MockLvlm::new(world()).with_part_budget(2);
        let ctx = GenerationContext::with_image(vec![
            PromptPart::text("x"),
            PromptPart::image("img://a"),
            PromptPart::text("Is there a cup?"),
        ]);
        assert!(matches!(lvlm.generate(&ctx, 2), Err(Error::UnsupportedContext(_))));
    }

    #[test]
    fn score_matches_generate() {
        let lvlm = MockLvlm::new(world());
        for (uri, q) in
            [("img://a", "Is there a clock?"), ("img://b", "Describe the image."), ("img://a", "Is there a cup?")]
        {
            let ctx = plain(uri, q);
            let trace = lvlm.generate(&ctx, 16).unwrap();
            assert_eq!(lvlm.score(&ctx, &trace.tokens).unwrap(), trace.token_probs);
        }
    }

    #[test]
    fn describe_lists_visible_entities() {
        let lvlm = MockLvlm::new(world());
        assert_eq!(
            lvlm.generate(&plain("img://b", "Describe the image."), 16).unwrap().text(),
            "a photo of bus and car"
        );
        let crop = GenerationContext::with_image(vec![
            PromptPart::crop("img://a", Region::new(50, 60, 10, 12, "cup").unwrap()),
            PromptPart::text("Describe the image."),
        ]);
        assert_eq!(lvlm.generate(&crop, 16).unwrap().text(), "a photo of cup");
        let blind_crop = GenerationContext::with_image(vec![
            PromptPart::crop("img://a", Region::new(10, 5, 30, 30, "clock").unwrap()),
            PromptPart::text("Describe the image."),
        ]);
        assert_eq!(lvlm.generate(&blind_crop, 16).unwrap().text(), "a photo");
    }

    #[test]
    fn query_only_uses_prior() {
        let lvlm = MockLvlm::new(world());
        let ctx = GenerationContext::text_only(vec![PromptPart::text("Is there a clock?")]);
        let no = lvlm.score(&ctx, &[Token::new(NO.0, "no")]).unwrap()[0];
        let v = mock_vocabulary().len() as f64;
        let expected = (1.0 - REST_MASS) * (1.0 - prior_yes("clock")) + REST_MASS / v;
        assert!((no - expected).abs() < 1e-15);
    }

    #[test]
    fn full_distortion_mixes_half_uniform() {
        let lvlm = MockLvlm::new(world());
        let clean = plain("img://a", "Is there a cup?");
        let noisy = GenerationContext::distorted(clean.parts.clone(), 1.0);
        let answer = lvlm.generate(&clean, 4).unwrap();
        let p = answer.token_probs[0];
        let v = mock_vocabulary().len() as f64;
        let q = lvlm.score(&noisy, &answer.tokens).unwrap()[0];
        assert!((q - (0.5 * p + 0.5 / v)).abs() < 1e-15);
    }

    #[test]
    fn distortion_monotone() {
        let lvlm = MockLvlm::new(world());
        for q in ["Is there a cup?", "Is there a clock?", "Is there a dog?"] {
            let clean = plain("img://a", q);
            let answer = lvlm.generate(&clean, 4).unwrap();
            let mut last = f64::INFINITY;
            for step in 0..=10 {
                let ctx = GenerationContext::distorted(clean.parts.clone(), step as f64 / 10.0);
                let p = lvlm.score(&ctx, &answer.tokens).unwrap()[0];
                assert!(p <= last);
                last = p;
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = MockLvlm::new(world());
        let b = MockLvlm::new(world());
        let ctx = plain("img://a", "Is there a clock?");
        let (da, db) = (a.next_distribution(&ctx, &[]).unwrap(), b.next_distribution(&ctx, &[]).unwrap());
        assert!(da.probs().iter().zip(db.probs()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn embedder_is_an_order_free_bag() {
        let e = MockEmbedder::new(world());
        assert_eq!(e.embed_text("a red shirt").unwrap(), e.embed_text("red shirt a").unwrap());
        assert_eq!(e.embed_text("A RED, shirt!").unwrap(), e.embed_text("a red shirt").unwrap());
        assert!(e.embed_text("a red shirt").unwrap().is_normalized());
        assert!(matches!(e.embed_image("img://none", None), Err(Error::UnknownImage(_))));
        let crop = e.embed_image("img://a", Some(&Region::new(10, 5, 30, 30, "clock").unwrap())).unwrap();
        assert_eq!(crop, e.embed_text("round wall clock").unwrap());
        e.set_available(false);
        assert!(matches!(e.embed_text("x"), Err(Error::ProviderUnavailable(_))));
    }

    #[test]
    fn disjoint_entity_words_are_near_orthogonal() {
        // Signed hashing gives cosine exactly 0 for disjoint words unless two
        // words share a bucket (then +-1). Measured on the entity vocabulary.
        let e = MockEmbedder::new(world());
        let vecs: Vec<_> = ENTITIES.iter().map(|w| e.embed_text(w).unwrap()).collect();
        let mut positive = 0usize;
        let mut pairs = 0usize;
        let mut sum = 0.0;
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                let c = cosine_similarity(&vecs[i], &vecs[j]).unwrap();
                pairs += 1;
                sum += c;
                if c > 1e-9 {
                    positive += 1;
                }
            }
        }
        assert!((positive as f64) / (pairs as f64) < 0.02, "{positive}/{pairs}");
        assert!((sum / pairs as f64).abs() < 0.01);
    }

    #[test]
    fn grounder_reads_annotations() {
        let g = MockGrounder::new(world());
        assert_eq!(g.extract_entities("Is there a clock in the image?").unwrap(), ["clock"]);
        assert!(g.extract_entities("Describe the image").unwrap().is_empty());
        assert!(g.ground("img://a", "zebra").unwrap().is_none());
        assert_eq!(g.ground("img://a", "clock").unwrap().unwrap().entity, "clock");
        g.set_available(false);
        assert!(matches!(g.extract_entities("Is there a clock?"), Err(Error::ProviderUnavailable(_))));
    }

    #[test]
    fn entity_matching_handles_plurals() {
        assert_eq!(find_entities("Are there two dogs and a cat?"), ["dog", "cat"]);
        assert!(mentions("three clocks", "clock"));
        assert!(!mentions("clockwork", "clock"));
    }

    #[test]
    fn world_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.jsonl");
        let w = world();
        w.save(&path).unwrap();
        let back = MockWorld::load(&path).unwrap();
        assert_eq!(back.images().collect::<Vec<_>>(), w.images().collect::<Vec<_>>());
    }
}
