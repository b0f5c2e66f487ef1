//! Synthetic stand-in for images: named entities, perturbed views, multi-entity
//! scenes with boxes, and noisy identity embeddings.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::{iou, BBox, EmbeddingVector};
use crate::seed;

/// Index into [`WorldConfig::lexicon`].
pub type AttrId = u16;

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub entities: usize,
    pub categories: Vec<String>,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub accessories: Vec<String>,
    /// Pose and lighting words added by view perturbation.
    pub variations: Vec<String>,
    /// How many attribute groups (in color, shape, accessory order) are
    /// identity-defining alongside the category.
    pub identity_attributes: usize,
    pub width: u32,
    pub height: u32,
    pub box_min: u32,
    pub box_max: u32,
    pub max_entities_per_scene: usize,
    pub overlap_cap: f64,
    pub placement_attempts: usize,
    /// Variation level used for views inside composed scenes.
    pub scene_variation: f64,
    pub embedding_dim: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            entities: 12,
            categories: words(&["cat", "dog", "car", "cup"]),
            colors: words(&["red", "blue", "green", "yellow"]),
            shapes: words(&["round", "square"]),
            accessories: words(&["hat", "scarf", "bow"]),
            variations: words(&["left", "right", "dark", "bright"]),
            identity_attributes: 1,
            width: 8,
            height: 8,
            box_min: 2,
            box_max: 4,
            max_entities_per_scene: 4,
            overlap_cap: 0.1,
            placement_attempts: 500,
            scene_variation: 0.5,
            embedding_dim: 16,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.entities == 0 {
            return bad("world needs at least one entity".into());
        }
        for (group, ws) in [
            ("categories", &self.categories),
            ("colors", &self.colors),
            ("shapes", &self.shapes),
            ("accessories", &self.accessories),
            ("variations", &self.variations),
        ] {
            if ws.len() < 2 {
                return bad(format!("{group} needs at least 2 words, got {}", ws.len()));
            }
        }
        if self.identity_attributes > 3 {
            return bad("identity_attributes must be at most 3".into());
        }
        if self.width == 0 || self.height == 0 {
            return bad("scene dimensions must be positive".into());
        }
        if self.box_min == 0 || self.box_min > self.box_max {
            return bad(format!(
                "box sizes must satisfy 1 <= box_min <= box_max, got {}..{}",
                self.box_min, self.box_max
            ));
        }
        if self.max_entities_per_scene == 0 {
            return bad("max_entities_per_scene must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.overlap_cap) {
            return bad("overlap_cap must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.scene_variation) {
            return bad("scene_variation must lie in [0, 1]".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if self.lexicon().len() > usize::from(AttrId::MAX) {
            return bad("attribute lexicon too large".into());
        }
        Ok(())
    }

    /// All attribute words: categories, colors, shapes, accessories, variations.
    pub fn lexicon(&self) -> Vec<&str> {
        self.categories
            .iter()
            .chain(&self.colors)
            .chain(&self.shapes)
            .chain(&self.accessories)
            .chain(&self.variations)
            .map(String::as_str)
            .collect()
    }

    fn group_offsets(&self) -> [usize; 5] {
        let c = self.categories.len();
        let co = c + self.colors.len();
        let s = co + self.shapes.len();
        let a = s + self.accessories.len();
        [0, c, co, s, a]
    }

    fn group_range(&self, group: usize) -> std::ops::Range<usize> {
        let offs = self.group_offsets();
        let end = offs
            .get(group + 1)
            .copied()
            .unwrap_or(offs[4] + self.variations.len());
        offs[group]..end
    }

    pub fn variation_range(&self) -> std::ops::Range<usize> {
        self.group_range(4)
    }

    /// Number of leading tokens of a canonical view that define identity.
    pub fn identity_len(&self) -> usize {
        1 + self.identity_attributes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: u32,
    pub category: AttrId,
    /// One token per attribute group: color, shape, accessory.
    pub attribute_tokens: Vec<AttrId>,
}

impl Entity {
    /// Category followed by the attribute tokens.
    pub fn canonical_tokens(&self) -> Vec<AttrId> {
        std::iter::once(self.category)
            .chain(self.attribute_tokens.iter().copied())
            .collect()
    }

    pub fn identity_tokens(&self, cfg: &WorldConfig) -> Vec<AttrId> {
        self.canonical_tokens()[..cfg.identity_len()].to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct View {
    pub entity_id: u32,
    /// Surviving canonical tokens, identity tokens first.
    pub visible_tokens: Vec<AttrId>,
    pub variation_tokens: Vec<AttrId>,
    pub bbox: BBox,
}

impl View {
    pub fn all_tokens(&self) -> impl Iterator<Item = AttrId> + '_ {
        self.visible_tokens
            .iter()
            .chain(&self.variation_tokens)
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub views: Vec<View>,
}

impl Scene {
    pub fn view_of(&self, entity_id: u32) -> Option<&View> {
        self.views.iter().find(|v| v.entity_id == entity_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub entities: Vec<Entity>,
    pub rng_seed: u64,
}

impl World {
    pub fn entity(&self, id: u32) -> Option<&Entity> {
        self.entities.iter().find(|e| e.entity_id == id)
    }
}

pub fn gen_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut rng = seed::rng_at(seed, &[0x0057_4f52_4c44]);
    let pick = |rng: &mut seed::Rng, group: usize| -> AttrId {
        let r = config.group_range(group);
        rng.random_range(r) as AttrId
    };
    let entities = (0..config.entities)
        .map(|i| Entity {
            entity_id: i as u32,
            category: pick(&mut rng, 0),
            attribute_tokens: (1..=3).map(|g| pick(&mut rng, g)).collect(),
        })
        .collect();
    Ok(World {
        config: config.clone(),
        entities,
        rng_seed: seed,
    })
}

fn sample_box(cfg: &WorldConfig, width: u32, height: u32, rng: &mut seed::Rng) -> Result<BBox> {
    if cfg.box_min > width || cfg.box_min > height {
        return Err(Error::SceneTooSmall {
            width,
            height,
            box_w: cfg.box_min,
            box_h: cfg.box_min,
        });
    }
    let bw = rng.random_range(cfg.box_min..=cfg.box_max.min(width));
    let bh = rng.random_range(cfg.box_min..=cfg.box_max.min(height));
    let x1 = rng.random_range(0..=width - bw);
    let y1 = rng.random_range(0..=height - bh);
    Ok(BBox::new(x1, y1, x1 + bw, y1 + bh).expect("ordered by construction"))
}

/// Renders one perturbed view of `entity`.
///
/// Identity tokens always survive. Every other canonical token is dropped with
/// probability `variation_level`, and up to two pose/lighting words are added,
/// each with probability `variation_level`.
pub fn render_view(
    cfg: &WorldConfig,
    entity: &Entity,
    (width, height): (u32, u32),
    variation_level: f64,
    seed: u64,
) -> Result<View> {
    if !(0.0..=1.0).contains(&variation_level) {
        return Err(Error::InvalidConfig(format!(
            "variation level {variation_level} outside [0, 1]"
        )));
    }
    let mut rng = seed::rng_at(seed, &[u64::from(entity.entity_id), 0x5649_4557]);
    let bbox = sample_box(cfg, width, height, &mut rng)?;
    let canonical = entity.canonical_tokens();
    let keep = cfg.identity_len();
    let mut visible = canonical[..keep].to_vec();
    for &t in &canonical[keep..] {
        if !rng.random_bool(variation_level) {
            visible.push(t);
        }
    }
    let pool: Vec<AttrId> = cfg.variation_range().map(|i| i as AttrId).collect();
    let mut variation_tokens = Vec::new();
    for _ in 0..2 {
        if rng.random_bool(variation_level) {
            let t = *pool.choose(&mut rng).expect("validated non-empty");
            if !variation_tokens.contains(&t) {
                variation_tokens.push(t);
            }
        }
    }
    Ok(View {
        entity_id: entity.entity_id,
        visible_tokens: visible,
        variation_tokens,
        bbox,
    })
}

const PLACEMENT_TRIES_PER_BOX: usize = 32;

/// Places one view per entity so that every pair overlaps by at most
/// `cfg.overlap_cap` IoU.
pub fn compose_scene(
    cfg: &WorldConfig,
    entities: &[&Entity],
    (width, height): (u32, u32),
    seed: u64,
) -> Result<Scene> {
    if entities.is_empty() || entities.len() > cfg.max_entities_per_scene {
        return Err(Error::InvalidConfig(format!(
            "scene needs 1..={} entities, got {}",
            cfg.max_entities_per_scene,
            entities.len()
        )));
    }
    let mut views: Vec<View> = entities
        .iter()
        .enumerate()
        .map(|(i, e)| {
            render_view(
                cfg,
                e,
                (width, height),
                cfg.scene_variation,
                seed::derive(seed, &[i as u64]),
            )
        })
        .collect::<Result<_>>()?;

    // Greedy placement can paint itself into a corner (a centered first box
    // blocks everything else on small canvases), so a failed layout restarts.
    let mut rng = seed::rng_at(seed, &[0x504c_4143_45]);
    let mut placed: Vec<BBox> = Vec::with_capacity(views.len());
    let mut ok = false;
    for _ in 0..cfg.placement_attempts.max(1) {
        placed.clear();
        ok = views.iter().all(|view| {
            let (bw, bh) = (view.bbox.width(), view.bbox.height());
            for _ in 0..PLACEMENT_TRIES_PER_BOX {
                let x1 = rng.random_range(0..=width - bw);
                let y1 = rng.random_range(0..=height - bh);
                let cand = BBox::new(x1, y1, x1 + bw, y1 + bh).expect("ordered");
                if placed.iter().all(|p| iou(p, &cand) <= cfg.overlap_cap) {
                    placed.push(cand);
                    return true;
                }
            }
            false
        });
        if ok {
            break;
        }
    }
    if !ok {
        return Err(Error::Placement {
            entities: entities.len(),
            width,
            height,
            attempts: cfg.placement_attempts,
        });
    }
    for (view, b) in views.iter_mut().zip(placed) {
        view.bbox = b;
    }
    Ok(Scene {
        width,
        height,
        views,
    })
}

/// Maps views to embeddings: a seeded Gaussian base vector per identity plus
/// isotropic Gaussian noise.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingProvider {
    pub dim: usize,
    pub identity_len: usize,
}

impl EmbeddingProvider {
    pub fn new(cfg: &WorldConfig) -> Self {
        Self {
            dim: cfg.embedding_dim,
            identity_len: cfg.identity_len(),
        }
    }

    fn identity_key(&self, view: &View) -> u64 {
        let mut bytes = view.entity_id.to_le_bytes().to_vec();
        for t in view.visible_tokens.iter().take(self.identity_len) {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        seed::fnv1a(&bytes)
    }

    pub fn base(&self, view: &View) -> EmbeddingVector {
        let mut rng = seed::rng(self.identity_key(view));
        EmbeddingVector(
            (0..self.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect(),
        )
    }

    pub fn embed(&self, view: &View, noise_sigma: f64, seed: u64) -> EmbeddingVector {
        let mut v = self.base(view);
        if noise_sigma > 0.0 {
            let mut rng = seed::rng_at(seed, &[self.identity_key(view), 0x4e4f_4953_45]);
            for x in &mut v.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += noise_sigma * z;
            }
        }
        v
    }
}
