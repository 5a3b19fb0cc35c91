//! Maskable neurons and per-pair binary masks.
//!
//! A neuron is one unit of a registered activation vector: an attention
//! sublayer output after its output projection (before the residual add), or
//! an FFN inner unit after the ReLU.

use std::fmt;
use std::str::FromStr;

use neuralloc_tensor::{Tape, Var};

use crate::allocation::{AllocationPlan, Role};
use crate::data::PairId;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Encoder => "enc",
            Side::Decoder => "dec",
        }
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enc" | "encoder" => Ok(Side::Encoder),
            "dec" | "decoder" => Ok(Side::Decoder),
            _ => Err(Error::data(format!("unknown side `{s}`"))),
        }
    }
}

/// Ordered as the registry enumerates them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    SelfAttnOut,
    CrossAttnOut,
    FfnInner,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::SelfAttnOut => "self_attn_out",
            Site::CrossAttnOut => "cross_attn_out",
            Site::FfnInner => "ffn_inner",
        }
    }
}

impl FromStr for Site {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self_attn_out" => Ok(Site::SelfAttnOut),
            "cross_attn_out" => Ok(Site::CrossAttnOut),
            "ffn_inner" => Ok(Site::FfnInner),
            _ => Err(Error::data(format!("unknown site `{s}`"))),
        }
    }
}

/// One activation vector: `(side, layer, site)`. Layers are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteKey {
    pub side: Side,
    pub layer: usize,
    pub site: Site,
}

impl fmt::Display for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.side.name(), self.layer, self.site.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NeuronId {
    pub side: Side,
    pub layer: usize,
    pub site: Site,
    pub unit: usize,
}

impl NeuronId {
    pub fn key(&self) -> SiteKey {
        SiteKey {
            side: self.side,
            layer: self.layer,
            site: self.site,
        }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.key(), self.unit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SiteGroup {
    pub key: SiteKey,
    pub width: usize,
    /// Flat index of unit 0.
    pub offset: usize,
}

/// Canonically ordered list of every maskable neuron.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NeuronRegistry {
    groups: Vec<SiteGroup>,
    len: usize,
}

impl NeuronRegistry {
    /// Encoder before decoder, layers ascending, sites in `Site` order.
    pub fn from_config(config: &ModelConfig) -> Self {
        let mut widths = Vec::new();
        for side in [Side::Encoder, Side::Decoder] {
            for layer in 1..=config.num_layers {
                widths.push((SiteKey { side, layer, site: Site::SelfAttnOut }, config.d_model));
                if side == Side::Decoder {
                    widths.push((SiteKey { side, layer, site: Site::CrossAttnOut }, config.d_model));
                }
                widths.push((SiteKey { side, layer, site: Site::FfnInner }, config.d_ffn));
            }
        }
        Self::from_groups(widths).expect("config-derived groups are valid")
    }

    /// Registry over explicit `(site, width)` groups, in the given order.
    pub fn from_groups(widths: Vec<(SiteKey, usize)>) -> Result<Self> {
        let mut groups = Vec::with_capacity(widths.len());
        let mut offset = 0;
        for (key, width) in widths {
            if width == 0 {
                return Err(Error::data(format!("site {key} has zero width")));
            }
            if key.site == Site::CrossAttnOut && key.side == Side::Encoder {
                return Err(Error::data("cross_attn_out exists only on the decoder side"));
            }
            if groups.iter().any(|g: &SiteGroup| g.key == key) {
                return Err(Error::data(format!("site {key} listed twice")));
            }
            groups.push(SiteGroup { key, width, offset });
            offset += width;
        }
        Ok(Self { groups, len: offset })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn groups(&self) -> &[SiteGroup] {
        &self.groups
    }

    pub fn group(&self, key: SiteKey) -> Option<&SiteGroup> {
        self.groups.iter().find(|g| g.key == key)
    }

    pub fn ids(&self) -> impl Iterator<Item = NeuronId> + '_ {
        self.groups.iter().flat_map(|g| {
            (0..g.width).map(move |unit| NeuronId {
                side: g.key.side,
                layer: g.key.layer,
                site: g.key.site,
                unit,
            })
        })
    }

    pub fn index_of(&self, id: &NeuronId) -> Option<usize> {
        let g = self.group(id.key())?;
        (id.unit < g.width).then_some(g.offset + id.unit)
    }

    pub fn id_at(&self, flat: usize) -> Option<NeuronId> {
        let g = self.groups.iter().find(|g| flat >= g.offset && flat < g.offset + g.width)?;
        Some(NeuronId {
            side: g.key.side,
            layer: g.key.layer,
            site: g.key.site,
            unit: flat - g.offset,
        })
    }

    /// Groups belonging to one side and layer.
    pub fn layer_groups(&self, side: Side, layer: usize) -> impl Iterator<Item = &SiteGroup> {
        self.groups.iter().filter(move |g| g.key.side == side && g.key.layer == layer)
    }

    pub fn layers(&self, side: Side) -> Vec<usize> {
        let mut ls: Vec<usize> = self.groups.iter().filter(|g| g.key.side == side).map(|g| g.key.layer).collect();
        ls.dedup();
        ls
    }
}

pub fn enumerate_sites(config: &ModelConfig) -> NeuronRegistry {
    NeuronRegistry::from_config(config)
}

/// Binary activity per registry neuron; `true` = active.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    registry: NeuronRegistry,
    bits: Vec<bool>,
}

impl Mask {
    pub fn all_active(registry: &NeuronRegistry) -> Self {
        Self {
            registry: registry.clone(),
            bits: vec![true; registry.len()],
        }
    }

    pub fn from_bits(registry: &NeuronRegistry, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != registry.len() {
            return Err(Error::Mismatch(format!(
                "mask has {} bits but the registry has {} neurons",
                bits.len(),
                registry.len()
            )));
        }
        Ok(Self {
            registry: registry.clone(),
            bits,
        })
    }

    pub fn registry(&self) -> &NeuronRegistry {
        &self.registry
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_active(&self, flat: usize) -> bool {
        self.bits[flat]
    }

    pub fn set(&mut self, flat: usize, active: bool) {
        self.bits[flat] = active;
    }

    pub fn count_active(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Bits of one site as multiplicative factors.
    pub fn site_factors(&self, key: SiteKey) -> Option<Vec<f32>> {
        let g = self.registry.group(key)?;
        Some(
            self.bits[g.offset..g.offset + g.width]
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn site_bits(&self, key: SiteKey) -> Option<&[bool]> {
        let g = self.registry.group(key)?;
        Some(&self.bits[g.offset..g.offset + g.width])
    }
}

/// Zeroes the units of `activation` whose bit is clear. Broadcasts over all
/// leading dimensions; masked positions receive zero gradient.
pub fn apply_mask(tape: &mut Tape, activation: Var, bits: &[bool]) -> Result<Var> {
    let width = tape.value(activation).last_dim();
    if width != bits.len() {
        return Err(Error::Mismatch(format!(
            "mask width {} does not match activation width {width}",
            bits.len()
        )));
    }
    let factors: Vec<f32> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(tape.mask_mul(activation, &factors)?)
}

/// One mask per language pair, bound to the plan it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub pairs: Vec<PairId>,
    pub masks: Vec<Mask>,
    pub plan_fingerprint: String,
}

impl MaskSet {
    /// Every neuron active for every pair; equivalent to no masking.
    pub fn all_active(registry: &NeuronRegistry, pairs: &[PairId]) -> Self {
        Self {
            pairs: pairs.to_vec(),
            masks: vec![Mask::all_active(registry); pairs.len()],
            plan_fingerprint: String::new(),
        }
    }

    pub fn mask(&self, pair: usize) -> &Mask {
        &self.masks[pair]
    }

    pub fn mask_for(&self, pair: &PairId) -> Option<&Mask> {
        self.pairs.iter().position(|p| p == pair).map(|i| &self.masks[i])
    }
}

/// Bit `i` of pair `m` is set iff neuron `i` is general or `m` is in its
/// specific set.
pub fn build_mask_set(plan: &AllocationPlan, config: &ModelConfig) -> Result<MaskSet> {
    let registry = NeuronRegistry::from_config(config);
    if plan.registry() != &registry {
        return Err(Error::Mismatch(format!(
            "plan covers {} neurons but the model registry has {}",
            plan.registry().len(),
            registry.len()
        )));
    }
    if plan.pairs() != config.language_pairs.as_slice() {
        return Err(Error::Mismatch("plan language pairs differ from the model's".into()));
    }
    build_mask_set_for(plan)
}

/// Mask set over the plan's own registry.
pub fn build_mask_set_for(plan: &AllocationPlan) -> Result<MaskSet> {
    let registry = plan.registry();
    let masks = (0..plan.pairs().len())
        .map(|m| {
            let bits = plan
                .roles()
                .iter()
                .map(|role| match role {
                    Role::General => true,
                    Role::Specific(set) => set.contains(&m),
                })
                .collect();
            Mask::from_bits(registry, bits)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSet {
        pairs: plan.pairs().to_vec(),
        masks,
        plan_fingerprint: plan.fingerprint(),
    })
}
