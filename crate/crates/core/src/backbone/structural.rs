//! Weight-free parameter ledgers for every backbone kind.

use super::{BackboneConfig, BackboneKind};

/// Named parameter counts in build order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ledger {
    pub rows: Vec<(String, usize)>,
}

impl Ledger {
    pub fn push(&mut self, name: impl Into<String>, params: usize) {
        self.rows.push((name.into(), params));
    }

    pub fn extend(&mut self, other: Ledger) {
        self.rows.extend(other.rows);
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(|(_, n)| n).sum()
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub(crate) fn conv(cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> usize {
    cout * (cin / groups) * k * k + if bias { cout } else { 0 }
}

pub(crate) fn bn(c: usize) -> usize {
    2 * c
}

/// Bias-free convolution followed by batch norm.
pub(crate) fn conv_bn(cin: usize, cout: usize, k: usize) -> usize {
    conv(cin, cout, k, 1, false) + bn(cout)
}

fn basic_block(cin: usize, cout: usize, stride: usize) -> usize {
    let shortcut = if stride != 1 || cin != cout {
        conv_bn(cin, cout, 1)
    } else {
        0
    };
    conv_bn(cin, cout, 3) + conv_bn(cout, cout, 3) + shortcut
}

fn bottleneck(cin: usize, width: usize, cout: usize, stride: usize) -> usize {
    let shortcut = if stride != 1 || cin != cout {
        conv_bn(cin, cout, 1)
    } else {
        0
    };
    conv_bn(cin, width, 1) + conv_bn(width, width, 3) + conv_bn(width, cout, 1) + shortcut
}

fn inverted_residual(cin: usize, cout: usize, expansion: usize) -> usize {
    let hidden = cin * expansion;
    let expand = if expansion != 1 {
        conv_bn(cin, hidden, 1)
    } else {
        0
    };
    let depthwise = conv(hidden, hidden, 3, hidden, false) + bn(hidden);
    expand + depthwise + conv_bn(hidden, cout, 1)
}

fn residual_basic(cfg: &BackboneConfig) -> Ledger {
    let mut l = Ledger::default();
    let stem = cfg.stem_channels();
    l.push("encoder.stem", conv_bn(3, stem, cfg.stem_kernel()));
    let mut cin = stem;
    for (i, (&cout, &depth)) in cfg.channels().iter().zip(&cfg.depths).enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let mut n = 0;
        for d in 0..depth {
            n += if d == 0 {
                basic_block(cin, cout, stride)
            } else {
                basic_block(cout, cout, 1)
            };
        }
        l.push(format!("encoder.stage{}", i + 1), n);
        cin = cout;
    }
    l
}

fn residual_bottleneck(cfg: &BackboneConfig) -> Ledger {
    let mut l = Ledger::default();
    let stem = ((64.0 * cfg.width_multiplier).round() as usize).max(1);
    l.push("encoder.stem", conv_bn(3, stem, 7));
    let mut cin = stem;
    for (i, (&cout, &depth)) in cfg.channels().iter().zip(&cfg.depths).enumerate() {
        let width = (cout / 4).max(1);
        let stride = if i == 0 { 1 } else { 2 };
        let mut n = 0;
        for d in 0..depth {
            n += if d == 0 {
                bottleneck(cin, width, cout, stride)
            } else {
                bottleneck(cout, width, cout, 1)
            };
        }
        l.push(format!("encoder.stage{}", i + 1), n);
        cin = cout;
    }
    l
}

/// MobileNetV2 through the 160-channel blocks. The stride-16 stage holds two
/// block types (64 and 96 channels).
fn mobilenet_v2(cfg: &BackboneConfig) -> Ledger {
    let scale = |c: usize| ((c as f64 * cfg.width_multiplier).round() as usize).max(1);
    // (expansion, channels, repeats, stage index; None = stem)
    let table: [(usize, usize, usize, Option<usize>); 6] = [
        (1, 16, 1, None),
        (6, 24, 2, Some(0)),
        (6, 32, 3, Some(1)),
        (6, 64, 4, Some(2)),
        (6, 96, 3, Some(2)),
        (6, 160, 3, Some(3)),
    ];
    let mut stage_totals = [0usize; 4];
    let first = scale(32);
    let mut stem = conv_bn(3, first, 3);
    let mut cin = first;
    for (t, c, n, stage) in table {
        let cout = scale(c);
        for _ in 0..n {
            let p = inverted_residual(cin, cout, t);
            match stage {
                Some(s) => stage_totals[s] += p,
                None => stem += p,
            }
            cin = cout;
        }
    }
    let mut l = Ledger::default();
    l.push("encoder.stem", stem);
    for (i, n) in stage_totals.iter().enumerate() {
        l.push(format!("encoder.stage{}", i + 1), *n);
    }
    l
}

/// Per-stage parameter ledger of a backbone (no classifier head).
pub fn backbone_ledger(cfg: &BackboneConfig) -> Ledger {
    match cfg.kind {
        BackboneKind::Tiny | BackboneKind::Resnet18 => residual_basic(cfg),
        BackboneKind::Resnet50Structural => residual_bottleneck(cfg),
        BackboneKind::MobileNetV2Structural => mobilenet_v2(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_backbone_totals() {
        assert_eq!(
            backbone_ledger(&BackboneConfig::resnet18()).total(),
            11_176_512
        );
        assert_eq!(
            backbone_ledger(&BackboneConfig::resnet50()).total(),
            23_508_032
        );
        assert_eq!(
            backbone_ledger(&BackboneConfig::mobilenetv2()).total(),
            1_337_792
        );
    }

    #[test]
    fn conv_closed_form() {
        assert_eq!(conv(64, 64, 3, 1, true), 36_928);
    }
}
