use std::fmt;

use serde::{Deserialize, Serialize};

use crate::vit::{EffortConfig, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleLabel {
    #[serde(rename = "QKV")]
    Qkv,
    #[serde(rename = "QKT")]
    Qkt,
    #[serde(rename = "SM")]
    Softmax,
    #[serde(rename = "SMxV")]
    SmxV,
    #[serde(rename = "Proj")]
    Proj,
    #[serde(rename = "MLP1")]
    Mlp1,
    #[serde(rename = "GELU")]
    Gelu,
    #[serde(rename = "MLP2")]
    Mlp2,
}

impl ModuleLabel {
    pub const ALL: [ModuleLabel; 8] = [
        ModuleLabel::Qkv,
        ModuleLabel::Qkt,
        ModuleLabel::Softmax,
        ModuleLabel::SmxV,
        ModuleLabel::Proj,
        ModuleLabel::Mlp1,
        ModuleLabel::Gelu,
        ModuleLabel::Mlp2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleLabel::Qkv => "QKV",
            ModuleLabel::Qkt => "QKT",
            ModuleLabel::Softmax => "SM",
            ModuleLabel::SmxV => "SMxV",
            ModuleLabel::Proj => "Proj",
            ModuleLabel::Mlp1 => "MLP1",
            ModuleLabel::Gelu => "GELU",
            ModuleLabel::Mlp2 => "MLP2",
        }
    }

    /// Part of the attention module (skipped together with it).
    pub fn is_attention(self) -> bool {
        matches!(
            self,
            ModuleLabel::Qkv
                | ModuleLabel::Qkt
                | ModuleLabel::Softmax
                | ModuleLabel::SmxV
                | ModuleLabel::Proj
        )
    }
}

impl fmt::Display for ModuleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkloadKind {
    /// `count` independent `(M x K) . (K x N)` products.
    Gemm {
        m: usize,
        k: usize,
        n: usize,
        count: usize,
    },
    Softmax {
        elements: usize,
    },
    Gelu {
        elements: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadItem {
    pub encoder: usize,
    pub module: ModuleLabel,
    pub kind: WorkloadKind,
}

/// Lowers every encoder to its GEMMs and PS-side non-linear ops. Encoders with
/// a skipped attention only contribute the MLP items.
pub fn lower_workload(vit: &ViTConfig, effort: &EffortConfig) -> Vec<WorkloadItem> {
    let t = vit.tokens;
    let d = vit.embed_dim;
    let dh = vit.head_dim();
    let h = vit.num_heads;
    let hidden = vit.mlp_hidden();
    let mut items = Vec::new();
    for encoder in 1..=vit.num_encoders {
        let mut push = |module, kind| {
            items.push(WorkloadItem {
                encoder,
                module,
                kind,
            })
        };
        let gemm = |m, k, n, count| WorkloadKind::Gemm { m, k, n, count };
        if effort.is_active(encoder) {
            push(ModuleLabel::Qkv, gemm(t, d, 3 * d, 1));
            push(ModuleLabel::Qkt, gemm(t, dh, t, h));
            push(
                ModuleLabel::Softmax,
                WorkloadKind::Softmax {
                    elements: h * t * t,
                },
            );
            push(ModuleLabel::SmxV, gemm(t, t, dh, h));
            push(ModuleLabel::Proj, gemm(t, d, d, 1));
        }
        push(ModuleLabel::Mlp1, gemm(t, d, hidden, 1));
        push(
            ModuleLabel::Gelu,
            WorkloadKind::Gelu {
                elements: t * hidden,
            },
        );
        push(ModuleLabel::Mlp2, gemm(t, hidden, d, 1));
    }
    items
}
