//! The full reconstruction network and batch preparation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tensor, Var};
use crate::ca_decoder::{AttentionMaps, CaDecoder};
use crate::chamfer::ChamferVariant;
use crate::config::{LossTarget, ModelConfig};
use crate::dataset::{MaskPartition, MaskSpec, Sample};
use crate::error::{Error, Result};
use crate::geometry::{group_cloud, FpsStart, GroupedPointCloud, Point3};
use crate::image_tokenizer::{patchify, ImageTokenizer, PatchGrid};
use crate::nn::{Ctx, Init, ParamStore};
use crate::pc_encoder::{PcEncoder, PointTokens};

/// One sample after grouping, masking and patching.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub grouped: GroupedPointCloud,
    pub partition: MaskPartition,
    pub patches: PatchGrid,
}

impl PreparedSample {
    pub fn new(sample: &Sample, cfg: &ModelConfig, mask_seed: u64) -> Result<Self> {
        if sample.image.height != cfg.image_size || sample.image.width != cfg.image_size {
            return Err(Error::Config(format!(
                "sample `{}` has a {}x{} image but the model expects {}x{}",
                sample.id, sample.image.height, sample.image.width, cfg.image_size, cfg.image_size
            )));
        }
        let n = sample.cloud.len();
        if n < cfg.groups || n < cfg.group_size {
            return Err(Error::Config(format!(
                "sample `{}` has {n} points; groups = {} and group_size = {} need at least {}",
                sample.id,
                cfg.groups,
                cfg.group_size,
                cfg.groups.max(cfg.group_size)
            )));
        }
        let grouped = group_cloud(&sample.cloud, cfg.groups, cfg.group_size, FpsStart::Index(0))?;
        let partition = MaskSpec {
            mask_ratio: cfg.mask_ratio,
            seed: mask_seed,
        }
        .partition(cfg.groups)?;
        Ok(PreparedSample {
            id: sample.id.clone(),
            grouped,
            partition,
            patches: patchify(&sample.image, cfg.groups)?,
        })
    }

    /// The ground truth every prediction is compared with: all grouped points.
    pub fn full_target(&self) -> Vec<Point3> {
        self.grouped.absolute_points()
    }

    fn points_of(&self, groups: &[usize]) -> Vec<Point3> {
        groups.iter().flat_map(|&g| self.grouped.absolute_group(g)).collect()
    }

    pub fn visible_points(&self) -> Vec<Point3> {
        self.points_of(&self.partition.visible)
    }

    pub fn masked_points(&self) -> Vec<Point3> {
        self.points_of(&self.partition.masked)
    }
}

/// Stacked tensors of a batch of prepared samples.
struct BatchTensors {
    visible_groups: Tensor,
    visible_centers: Tensor,
    masked_centers: Option<Tensor>,
    centers_rep: Tensor,
    order: Vec<Vec<usize>>,
}

fn stack_batch(batch: &[PreparedSample], m: usize) -> Result<BatchTensors> {
    let first = batch.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (b, g) = (batch.len(), first.grouped.num_groups());
    let (gv, gm) = (first.partition.visible.len(), first.partition.masked.len());
    let mut vg = Vec::with_capacity(b * gv * m * 3);
    let mut vc = Vec::with_capacity(b * gv * 3);
    let mut mc = Vec::with_capacity(b * gm * 3);
    let mut rep = Vec::with_capacity(b * g * m * 3);
    let mut order = Vec::with_capacity(b);
    for s in batch {
        if s.partition.visible.len() != gv || s.grouped.num_groups() != g || s.grouped.group_size != m {
            return Err(Error::Contract("batch items disagree on group layout".into()));
        }
        for &i in &s.partition.visible {
            vg.extend(s.grouped.group(i).iter().flatten());
            vc.extend(s.grouped.centers[i]);
        }
        for &i in &s.partition.masked {
            mc.extend(s.grouped.centers[i]);
        }
        for c in &s.grouped.centers {
            for _ in 0..m {
                rep.extend(c);
            }
        }
        order.push(s.partition.group_order());
    }
    Ok(BatchTensors {
        visible_groups: Tensor::new(vec![b, gv, m, 3], vg)?,
        visible_centers: Tensor::new(vec![b, gv, 3], vc)?,
        masked_centers: if gm > 0 {
            Some(Tensor::new(vec![b, gm, 3], mc)?)
        } else {
            None
        },
        centers_rep: Tensor::new(vec![b, g, m, 3], rep)?,
        order,
    })
}

/// Per-call switches for [`Model::forward`].
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Run cross-attention with image tokens; otherwise the point tokens go
    /// straight to the decoder.
    pub fuse: bool,
    /// Drives patch dropout; `None` means no dropout (evaluation).
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    pub record_attention: bool,
}

pub struct ForwardOutput<'t> {
    /// `[B, G, M, 3]` absolute predicted points.
    pub points: Var<'t>,
    /// Per cross-attention layer `[B, heads, G, G]`, when recorded.
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub pc: PcEncoder,
    pub img: ImageTokenizer,
    pub dec: CaDecoder,
}

impl Model {
    /// Builds and initializes every parameter from `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            precision: cfg.precision,
        };
        let pc = PcEncoder::new(&mut init, cfg);
        let img = ImageTokenizer::new(&mut init, cfg);
        let dec = CaDecoder::new(&mut init, cfg);
        Ok(Model {
            cfg: cfg.clone(),
            store,
            pc,
            img,
            dec,
        })
    }

    pub fn prepare(&self, sample: &Sample, mask_seed: u64) -> Result<PreparedSample> {
        PreparedSample::new(sample, &self.cfg, mask_seed)
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        batch: &[PreparedSample],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput<'t>> {
        let t = stack_batch(batch, self.cfg.group_size)?;
        let x = self.encode_batch(ctx, &t)?.in_group_order(&t.order)?;
        let image = if opts.fuse {
            let grids: Vec<PatchGrid> = batch.iter().map(|s| s.patches.clone()).collect();
            let mut patches = self.img.patch_tensor(&grids)?;
            if let Some(rng) = opts.dropout_rng {
                self.img.drop_patches(&mut patches, rng);
            }
            Some(self.img.forward(ctx, ctx.constant(patches))?)
        } else {
            None
        };
        let mut attention = Vec::new();
        let record = opts.record_attention.then_some(&mut attention);
        let fused = self.dec.decode(ctx, x, image, record)?;
        let points = self.dec.head.forward(ctx, fused, ctx.constant(t.centers_rep))?;
        Ok(ForwardOutput { points, attention })
    }

    /// Point-branch output only: visible encodings and mask queries.
    pub fn point_tokens<'t>(&self, ctx: &Ctx<'t>, batch: &[PreparedSample]) -> Result<PointTokens<'t>> {
        self.encode_batch(ctx, &stack_batch(batch, self.cfg.group_size)?)
    }

    fn encode_batch<'t>(&self, ctx: &Ctx<'t>, t: &BatchTensors) -> Result<PointTokens<'t>> {
        self.pc.forward(
            ctx,
            ctx.constant(t.visible_groups.clone()),
            ctx.constant(t.visible_centers.clone()),
            t.masked_centers.clone().map(|m| ctx.constant(m)),
        )
    }

    /// Mean per-sample Chamfer distance between predictions and targets
    /// chosen by `cfg.loss_target`.
    pub fn loss<'t>(&self, points: Var<'t>, batch: &[PreparedSample]) -> Result<Var<'t>> {
        self.loss_with(points, batch, self.cfg.chamfer)
    }

    pub fn loss_with<'t>(&self, points: Var<'t>, batch: &[PreparedSample], variant: ChamferVariant) -> Result<Var<'t>> {
        let s = points.shape();
        let (b, g, m) = (s[0], s[1], s[2]);
        match self.cfg.loss_target {
            LossTarget::Full => {
                let targets: Vec<Vec<Point3>> = batch.iter().map(PreparedSample::full_target).collect();
                points.reshape(&[b, g * m, 3])?.chamfer_loss(&targets, variant)
            }
            LossTarget::Masked => {
                let index: Vec<Vec<usize>> = batch.iter().map(|s| s.partition.masked.clone()).collect();
                let gm = index[0].len();
                if gm == 0 {
                    return Err(Error::Config("loss_target = masked needs mask_ratio > 0".into()));
                }
                let targets: Vec<Vec<Point3>> = batch.iter().map(PreparedSample::masked_points).collect();
                points
                    .reshape(&[b, g, m * 3])?
                    .gather_rows(&index)?
                    .reshape(&[b, gm * m, 3])?
                    .chamfer_loss(&targets, variant)
            }
        }
    }

    /// Predicted absolute points per batch item (`G·M` each), or the visible
    /// input itself in identity-bypass mode.
    pub fn reconstruct(
        &self,
        batch: &[PreparedSample],
        fuse: bool,
        record_attention: bool,
    ) -> Result<(Vec<Vec<Point3>>, Option<AttentionMaps>)> {
        if self.cfg.identity_bypass {
            if record_attention {
                return Err(Error::Contract(
                    "attention export is unavailable in identity-bypass mode".into(),
                ));
            }
            return Ok((batch.iter().map(PreparedSample::visible_points).collect(), None));
        }
        let tape = crate::autograd::Tape::new(crate::autograd::TapeOptions {
            precision: self.cfg.precision,
            fault: None,
        });
        let ctx = Ctx::bind(&tape, &self.store);
        let out = self.forward(
            &ctx,
            batch,
            ForwardOptions {
                fuse,
                dropout_rng: None,
                record_attention,
            },
        )?;
        let per = self.cfg.groups * self.cfg.group_size * 3;
        let value = out.points.value();
        let clouds = value
            .data()
            .chunks_exact(per)
            .map(|c| c.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
            .collect();
        let maps = if record_attention {
            Some(AttentionMaps::from_recorded(&out.attention, 0)?)
        } else {
            None
        };
        Ok((clouds, maps))
    }
}
