use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agentnet::{Abstraction, AgentNet, AgentNetConfig};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::relmix::{Gcn, MixerConfig, MixerKind, MonotoneMixer, Relation};

/// The ablation grid. Each variant fixes the relation source, the entity
/// abstraction and the mixer family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Raca,
    QmixAttn,
    QmixGcn,
    Qmix,
    VdnAttn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Raca,
        Variant::QmixAttn,
        Variant::QmixGcn,
        Variant::Qmix,
        Variant::VdnAttn,
    ];

    pub fn relation(self) -> Relation {
        match self {
            Variant::Raca | Variant::QmixGcn => Relation::Gcn,
            _ => Relation::None,
        }
    }

    pub fn abstraction(self) -> Abstraction {
        match self {
            Variant::QmixGcn | Variant::Qmix => Abstraction::Mean,
            _ => Abstraction::Attention,
        }
    }

    pub fn mixer(self) -> MixerKind {
        match self {
            Variant::VdnAttn => MixerKind::Vdn,
            _ => MixerKind::Qmix,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Raca => "raca",
            Variant::QmixAttn => "qmix_attn",
            Variant::QmixGcn => "qmix_gcn",
            Variant::Qmix => "qmix",
            Variant::VdnAttn => "vdn_attn",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }
}

/// Network widths shared by every variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Widths {
    pub d_k: usize,
    pub d_h: usize,
    pub d_mix: usize,
    pub d_gcn: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Widths {
            d_k: 64,
            d_h: 64,
            d_mix: 32,
            d_gcn: 32,
        }
    }
}

/// Agent network plus the centralised relation encoder and mixer for one
/// team size.
#[derive(Clone, Debug)]
pub struct Model {
    pub agent: AgentNet,
    pub relation: Relation,
    pub gcn: Gcn,
    pub mixer: MonotoneMixer,
}

impl Model {
    pub fn new(
        variant: Variant,
        widths: &Widths,
        n_agents: usize,
        state_dim: usize,
    ) -> Result<Self> {
        if widths.d_gcn == 0 {
            return Err(Error::config("d_gcn", "must be positive"));
        }
        let agent = AgentNet::new(AgentNetConfig {
            d_k: widths.d_k,
            d_h: widths.d_h,
            abstraction: variant.abstraction(),
        })?;
        let gcn = Gcn::new(agent.node_feature_dim(), widths.d_gcn);
        let mixer = MonotoneMixer::new(
            MixerConfig {
                kind: variant.mixer(),
                d_mix: widths.d_mix,
            },
            n_agents,
            state_dim,
        )?;
        Ok(Model {
            agent,
            relation: variant.relation(),
            gcn,
            mixer,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.mixer.n_agents
    }

    /// Fresh parameters for every component this model uses.
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        self.agent.init(&mut store, rng);
        if self.relation == Relation::Gcn {
            self.gcn.init(&mut store, rng);
        }
        self.mixer.init(&mut store, rng);
        store
    }
}
