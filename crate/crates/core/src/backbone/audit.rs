//! Weight-free parameter audits and head-shape tracing for every variant.

use std::fmt::Write as _;

use super::structural::{backbone_ledger, conv, conv_bn, Ledger};
use super::{check_image_shape, STAGE_STRIDES};
use crate::error::Result;
use crate::model::{VariantConfig, VariantName, HEAD_NAMES};
use crate::tensor::Shape;

/// Published total with a relative tolerance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditTarget {
    pub params: f64,
    pub tolerance: f64,
}

impl AuditTarget {
    pub fn for_variant(name: VariantName) -> Self {
        match name {
            VariantName::S => AuditTarget {
                params: 1.7e6,
                tolerance: 0.15,
            },
            VariantName::M => AuditTarget {
                params: 12.612e6,
                tolerance: 0.10,
            },
            VariantName::L => AuditTarget {
                params: 26.48e6,
                tolerance: 0.15,
            },
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        (
            self.params * (1.0 - self.tolerance),
            self.params * (1.0 + self.tolerance),
        )
    }

    pub fn accepts(&self, total: usize) -> bool {
        let (lo, hi) = self.bounds();
        (lo..=hi).contains(&(total as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRow {
    pub module: String,
    pub params: usize,
    pub cumulative: usize,
}

#[derive(Clone, Debug)]
pub struct AuditReport {
    pub variant: VariantConfig,
    pub rows: Vec<AuditRow>,
    pub target: AuditTarget,
}

impl AuditReport {
    pub fn total(&self) -> usize {
        self.rows.last().map_or(0, |r| r.cumulative)
    }

    pub fn passed(&self) -> bool {
        self.target.accepts(self.total())
    }

    pub fn get(&self, module: &str) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.module == module)
            .map(|r| r.params)
    }

    /// Sum over rows whose name starts with `prefix`.
    pub fn prefix_total(&self, prefix: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.module == prefix || r.module.starts_with(&format!("{prefix}.")))
            .map(|r| r.params)
            .sum()
    }

    pub fn verdict_line(&self) -> String {
        let (lo, hi) = self.target.bounds();
        format!(
            "{} CTD-{} total={} target={:.3}M range=[{:.3}M, {:.3}M]",
            if self.passed() { "PASS" } else { "FAIL" },
            self.variant.name,
            self.total(),
            self.target.params / 1e6,
            lo / 1e6,
            hi / 1e6
        )
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.module.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>12}",
            "module", "params", "cumulative"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>12}  {:>12}",
                r.module, r.params, r.cumulative
            );
        }
        let _ = writeln!(s, "{}", self.verdict_line());
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,params,cumulative\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.module, r.params, r.cumulative);
        }
        s
    }
}

fn sam(cin: usize, cout: usize) -> usize {
    conv(2, 1, 5, 1, true) + conv_bn(cin, cout, 3)
}

fn ffm(c: usize) -> usize {
    2 * conv_bn(c, c, 3)
}

/// Rows in the model's canonical parameter order; SAP rows are listed with 0.
fn ledger(v: &VariantConfig) -> Ledger {
    let mut l = backbone_ledger(&v.backbone);
    let [c2, c3, c4, c5] = v.backbone.channels();
    let c = v.c_dec;
    let n = v.sap.branches;
    let pk = v.sap_projection_kernel;
    let context = |l: &mut Ledger, tag: &str, cin: usize, with_sap: bool| {
        if with_sap {
            l.push(format!("sap{tag}"), 0);
            l.push(format!("proj{tag}"), conv_bn(n * cin, c, pk));
        } else {
            l.push(format!("proj{tag}"), conv_bn(cin, c, 3));
        }
    };

    let mut sem = Ledger::default();
    sem.push("global_proj", conv_bn(c5, c, 1));
    context(&mut sem, "5", c5, v.sap_enabled);
    context(&mut sem, "4", c4, v.sap_enabled);
    sem.push("ffm1", ffm(c));
    sem.push("ffm2", ffm(c));
    prefixed(&mut l, "semantic", sem);

    let mut spa = Ledger::default();
    if v.extra_e3_sap {
        context(&mut spa, "3", c3, true);
    }
    spa.push("sam", sam(if v.extra_e3_sap { c } else { c3 }, c));
    prefixed(&mut l, "spatial", spa);

    let mut bnd = Ledger::default();
    if v.extra_e2_sam {
        bnd.push("sam2", sam(c2, c));
    }
    bnd.push("proj2", conv_bn(if v.extra_e2_sam { c } else { c2 }, c, 1));
    bnd.push("ffm3", ffm(c));
    prefixed(&mut l, "boundary", bnd);

    if v.cam_substituted_by_conv3 {
        l.push("fusion.conv3", conv_bn(c, c, 3));
    } else {
        l.push("fusion.cam", 3 * conv_bn(c, c, 3) + ffm(c));
    }
    l.push("fusion.brm", conv(c, c, 1, 1, true) + 2 * conv_bn(c, c, 3));
    for head in HEAD_NAMES {
        l.push(format!("heads.{head}"), conv(c, 1, 3, 1, true));
    }
    l
}

fn prefixed(into: &mut Ledger, prefix: &str, rows: Ledger) {
    for (name, n) in rows.rows {
        into.push(format!("{prefix}.{name}"), n);
    }
}

fn report(v: &VariantConfig) -> AuditReport {
    let mut cumulative = 0;
    let rows = ledger(v)
        .rows
        .into_iter()
        .map(|(module, params)| {
            cumulative += params;
            AuditRow {
                module,
                params,
                cumulative,
            }
        })
        .collect();
    AuditReport {
        variant: v.clone(),
        rows,
        target: AuditTarget::for_variant(v.name),
    }
}

/// Per-module parameter table of `variant`, built without allocating weights.
pub fn structural_audit(variant: &VariantConfig) -> Result<AuditReport> {
    variant.validate()?;
    Ok(report(variant))
}

/// Parameters removed by dropping SAP: each SAP + `N·C → C_dec` projection
/// becomes a 3×3 `C → C_dec` unit.
pub fn sap_removal_delta(variant: &VariantConfig) -> Result<i64> {
    let with = structural_audit(variant)?.total() as i64;
    let mut ablated = variant.clone();
    ablated.sap_enabled = false;
    ablated.extra_e3_sap = false;
    Ok(with - report(&ablated).total() as i64)
}

/// Shapes of the six heads' features and predictions for an input size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadShapes {
    /// `(name, feature shape, prediction shape)` in canonical head order.
    pub heads: Vec<(&'static str, Shape, Shape)>,
    pub stages: [Shape; 4],
}

impl HeadShapes {
    pub fn prediction(&self, name: &str) -> Option<Shape> {
        self.heads.iter().find(|h| h.0 == name).map(|h| h.2)
    }

    /// Input extent divided by each head's extent.
    pub fn strides(&self, input_h: usize) -> Vec<usize> {
        self.heads.iter().map(|h| input_h / h.2.h).collect()
    }
}

/// Shape algebra of the forward pass; works for structural backbones too.
pub fn trace_head_shapes(
    variant: &VariantConfig,
    batch: usize,
    h: usize,
    w: usize,
) -> Result<HeadShapes> {
    variant.validate()?;
    check_image_shape(Shape::new(batch, 3, h, w))?;
    let channels = variant.backbone.channels();
    let stages: [Shape; 4] = std::array::from_fn(|i| {
        Shape::new(
            batch,
            channels[i],
            h / STAGE_STRIDES[i],
            w / STAGE_STRIDES[i],
        )
    });
    let head_strides = [4, 8, 16, 32, 32, 4];
    let heads = HEAD_NAMES
        .iter()
        .zip(head_strides)
        .map(|(&name, s)| {
            let feature = Shape::new(batch, variant.c_dec, h / s, w / s);
            (name, feature, feature.with_channels(1))
        })
        .collect();
    Ok(HeadShapes { heads, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ctd;
    use crate::nn::{named_parameters, Module};

    fn model_prefix_total(model: &dyn Module<f32>, prefix: &str) -> usize {
        named_parameters(model)
            .iter()
            .filter(|(n, _)| n.starts_with(&format!("{prefix}.")))
            .map(|(_, t)| t.numel())
            .sum()
    }

    #[test]
    fn ledger_matches_built_models() {
        for name in [VariantName::S, VariantName::M, VariantName::L] {
            let v = VariantConfig::desk(name);
            let model: Ctd<f32> = Ctd::new(&v, 0).unwrap();
            let audit = structural_audit(&v).unwrap();
            assert_eq!(audit.total(), crate::nn::count_parameters(&model), "{name}");
            for row in &audit.rows {
                assert_eq!(
                    model_prefix_total(&model, &row.module),
                    row.params,
                    "{name} {}",
                    row.module
                );
            }
        }
        let m = VariantConfig::m();
        let model: Ctd<f32> = Ctd::new(&m, 0).unwrap();
        assert_eq!(
            structural_audit(&m).unwrap().total(),
            crate::nn::count_parameters(&model)
        );
    }

    #[test]
    fn decoder_rows_match_decoder_only_models() {
        for v in [VariantConfig::s(), VariantConfig::m(), VariantConfig::l()] {
            let model: Ctd<f32> = Ctd::decoder_only(&v, 0).unwrap();
            let audit = structural_audit(&v).unwrap();
            let decoder = audit.total() - audit.prefix_total("encoder");
            assert_eq!(crate::nn::count_parameters(&model), decoder, "{}", v.name);
        }
    }

    #[test]
    fn reference_variants_within_tolerance() {
        for v in [VariantConfig::s(), VariantConfig::m(), VariantConfig::l()] {
            let r = structural_audit(&v).unwrap();
            assert!(r.passed(), "{}", r.verdict_line());
        }
    }

    #[test]
    fn sap_rows_are_zero_and_removal_costs_parameters() {
        let r = structural_audit(&VariantConfig::l()).unwrap();
        let saps: Vec<_> = r
            .rows
            .iter()
            .filter(|row| row.module.contains(".sap"))
            .collect();
        assert_eq!(saps.len(), 3);
        assert!(saps.iter().all(|row| row.params == 0));
        assert!(sap_removal_delta(&VariantConfig::m()).unwrap() > 500_000);
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let r = structural_audit(&VariantConfig::m()).unwrap();
        assert_eq!(r.to_csv().lines().count(), r.rows.len() + 1);
        assert!(r.to_text().contains("PASS"));
    }

    #[test]
    fn traced_shapes_for_m() {
        let s = trace_head_shapes(&VariantConfig::m(), 1, 352, 352).unwrap();
        assert_eq!(s.prediction("d_p123"), Some(Shape::new(1, 1, 88, 88)));
        assert_eq!(s.prediction("e6"), Some(Shape::new(1, 1, 11, 11)));
        assert_eq!(s.strides(352), vec![4, 8, 16, 32, 32, 4]);
        assert!(trace_head_shapes(&VariantConfig::m(), 1, 100, 96).is_err());
    }
}
