//! A two-branch HRNet miniature.
//!
//! ```text
//! stem    conv3×3 3→w, BN, ReLU                      (full resolution)
//! stage1  B basic blocks at w
//! trans   conv3×3/2 w→2w, BN, ReLU                   (second branch, half resolution)
//! stage2  B basic blocks per branch
//! fuse    y1 = ReLU(x1 + Resize×2(BN(conv1×1 2w→w)(x2)))
//!         y2 = ReLU(x2 + BN(conv3×3/2 w→2w)(x1))
//! head    Concat(y1, Resize×2(y2)) → conv1×1 3w→classes (with bias)
//! ```
//!
//! A basic block is `ReLU(x + BN(conv3×3(ReLU(BN(conv3×3(x))))))`. Convs
//! followed by BN carry no bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnInit, ConvAttrs, GraphBuilder, GraphModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HrnetLiteSpec {
    pub width: usize,
    pub blocks: usize,
    pub n_classes: usize,
    pub in_channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width_px: usize,
    pub seed: u64,
}

impl Default for HrnetLiteSpec {
    fn default() -> Self {
        Self {
            width: 8,
            blocks: 2,
            n_classes: 4,
            in_channels: 3,
            batch: 1,
            height: 64,
            width_px: 64,
            seed: 0,
        }
    }
}

impl HrnetLiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.n_classes < 2 || self.in_channels == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument(
                "width, in_channels and batch must be positive and n_classes >= 2".into(),
            ));
        }
        if self.height < 2 || self.width_px < 2 || !self.height.is_multiple_of(2) || !self.width_px.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "input size must be even and at least 2, got {}x{}",
                self.height, self.width_px
            )));
        }
        Ok(())
    }

    /// Headline parameter count implied by the layout above.
    pub fn param_count(&self) -> u64 {
        let (w, b, k, cin) = (self.width as u64, self.blocks as u64, self.n_classes as u64, self.in_channels as u64);
        let conv_bn = |ci: u64, co: u64, kk: u64| co * ci * kk * kk + 2 * co;
        conv_bn(cin, w, 3)
            + b * 2 * conv_bn(w, w, 3)
            + conv_bn(w, 2 * w, 3)
            + b * 2 * conv_bn(w, w, 3)
            + b * 2 * conv_bn(2 * w, 2 * w, 3)
            + conv_bn(2 * w, w, 1)
            + conv_bn(w, 2 * w, 3)
            + (3 * w * k + k)
    }

    /// Number of prunable channels: every conv except the classifier.
    pub fn prunable_channels(&self) -> usize {
        let (w, b) = (self.width, self.blocks);
        w + 2 * b * w + 2 * w + 2 * b * w + 2 * b * 2 * w + w + 2 * w
    }
}

fn basic_block(b: &mut GraphBuilder, x: &str, c: usize) -> String {
    let y = b.conv_bn_relu(x, c, ConvAttrs::square(3, 1, 1));
    let y = b.conv(&y, c, ConvAttrs::square(3, 1, 1), false);
    let y = b.batch_norm(&y);
    let s = b.add(&y, x);
    b.relu(&s)
}

pub fn build_hrnet_lite(spec: &HrnetLiteSpec) -> Result<GraphModel> {
    build_hrnet_lite_with(spec, BnInit::Identity)
}

pub fn build_hrnet_lite_with(spec: &HrnetLiteSpec, bn_init: BnInit) -> Result<GraphModel> {
    spec.validate()?;
    let w = spec.width;
    let mut b = GraphBuilder::new(
        "hrnet_lite",
        &[spec.batch, spec.in_channels, spec.height, spec.width_px],
        spec.seed,
    )
    .with_bn_init(bn_init);
    let x = b.input();

    b.set_prefix("stem.");
    let mut x1 = b.conv_bn_relu(&x, w, ConvAttrs::square(3, 1, 1));
    for i in 0..spec.blocks {
        b.set_prefix(&format!("stage1.block{i}."));
        x1 = basic_block(&mut b, &x1, w);
    }
    b.set_prefix("transition.");
    let mut x2 = b.conv_bn_relu(&x1, 2 * w, ConvAttrs::square(3, 2, 1));
    for i in 0..spec.blocks {
        b.set_prefix(&format!("stage2.branch0.block{i}."));
        x1 = basic_block(&mut b, &x1, w);
        b.set_prefix(&format!("stage2.branch1.block{i}."));
        x2 = basic_block(&mut b, &x2, 2 * w);
    }

    b.set_prefix("fuse.up.");
    let up = b.conv(&x2, w, ConvAttrs::square(1, 1, 0), false);
    let up = b.batch_norm(&up);
    let up = b.resize(&up, 2.0);
    let y1 = b.add(&x1, &up);
    let y1 = b.relu(&y1);
    b.set_prefix("fuse.down.");
    let down = b.conv(&x1, 2 * w, ConvAttrs::square(3, 2, 1), false);
    let down = b.batch_norm(&down);
    let y2 = b.add(&x2, &down);
    let y2 = b.relu(&y2);

    b.set_prefix("head.");
    let y2 = b.resize(&y2, 2.0);
    let cat = b.concat(&[&y1, &y2]);
    let logits = b.conv(&cat, spec.n_classes, ConvAttrs::square(1, 1, 0), true);
    b.output(&logits);
    b.finish()
}
