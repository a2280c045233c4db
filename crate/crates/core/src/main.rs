use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use panocube::checkpoint::{generator_from_checkpoint, Checkpoint};
use panocube::evaluation::{
    comparison_grid, evaluate, save_grid, Domain, EvalOptions, GeneratorInpainter, GrayInpainter, IdentityInpainter,
    Inpainter, Region,
};
use panocube::masking::{sample_rect_mask, RectSpec, DEFAULT_FILL};
use panocube::networks::Generator;
use panocube::pipeline::{
    decode_rgb, image_seed, infer, ingest, load_mask, load_samples, save_mask, save_rgb, write_atomic,
    Category, PreprocessOptions, SkipEntry, Split, TrainingSample,
};
use panocube::projection::{
    cubemap_to_equirect, cubemask_to_equirect, equirect_to_cubemap, mask_to_cubemap, CubeMap, CubeMask,
    EquirectImage, Face, Filter,
};
use panocube::training::{train, TrainConfig};
use panocube::{Error, Result};

/// 360-degree panorama inpainting on cube maps.
#[derive(Parser)]
#[command(name = "panocube", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert between an equirectangular panorama and six cube faces.
    Convert(ConvertArgs),
    /// Sample rectangular hole masks and save them as PNG.
    Mask(MaskArgs),
    /// Train the generator and both critics.
    Train(TrainArgs),
    /// Inpaint one panorama with a trained generator.
    Infer(InferArgs),
    /// Compute SSIM, PSNR, L1 and L2 over a dataset.
    Evaluate(EvaluateArgs),
    /// Render a damaged | inpainted | ground-truth comparison image.
    Grid(GridArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Cubemap,
    Equirect,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long, value_enum)]
    to: Target,
    /// Source image; a face pattern containing `%s` when converting to equirect.
    input: String,
    /// Destination; a face pattern containing `%s` when converting to a cube map.
    output: String,
    /// Face side; defaults to the panorama height.
    #[arg(long)]
    face_size: Option<usize>,
    /// Panorama width; defaults to twice the face side.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, value_enum, default_value_t = Filter::Bilinear)]
    filter: Filter,
    /// Treat the images as binary masks.
    #[arg(long)]
    mask: bool,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the six face masks of this side per panorama mask.
    #[arg(long)]
    face_size: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (optionally with buildings/ and scenery/).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Category::All)]
    category: Category,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// TOML file with training settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    face_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long)]
    critic_steps_per_gen_step: Option<usize>,
    #[arg(long)]
    equirect_width: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Damaged panorama.
    input: PathBuf,
    /// Hole mask PNG (0 = hole, 255 = valid).
    #[arg(long, conflicts_with = "rect", required_unless_present = "rect")]
    mask: Option<PathBuf>,
    /// Hole rectangle `x0,y0,width,height` in panorama pixels.
    #[arg(long)]
    rect: Option<RectSpec>,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the face side the checkpoint was trained at.
    #[arg(long)]
    face_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_FILL)]
    fill: f32,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    /// Ground truth in the hole: the metric ceiling.
    Identity,
    /// Fill colour left in the hole.
    Gray,
    /// Generator from `--checkpoint`.
    Checkpoint,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = Method::Checkpoint)]
    method: Method,
    #[arg(long, required_if_eq("method", "checkpoint"), required_unless_present = "method")]
    checkpoint: Option<PathBuf>,
    /// Defaults to the checkpoint's face side, or 256.
    #[arg(long)]
    face_size: Option<usize>,
    #[arg(long, default_value_t = 512)]
    equirect_width: usize,
    /// Seed for the per-image holes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_FILL)]
    fill: f32,
    #[arg(long, value_enum, default_value_t = Domain::Equirect)]
    domain: Domain,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = Region::Whole)]
    region: Region,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// At most this many rows.
    #[arg(long, default_value_t = 4)]
    limit: usize,
    #[arg(long)]
    out: PathBuf,
}

fn face_path(pattern: &str, face: Face) -> Result<PathBuf> {
    if !pattern.contains("%s") {
        return Err(Error::Validation(format!("face pattern {pattern:?} must contain %s")));
    }
    Ok(PathBuf::from(pattern.replace("%s", face.letter())))
}

fn convert(a: ConvertArgs) -> Result<serde_json::Value> {
    match a.to {
        Target::Cubemap => {
            let mut written = Vec::new();
            if a.mask {
                let m = load_mask(Path::new(&a.input))?;
                let cube = mask_to_cubemap(&m, a.face_size.unwrap_or(m.height()))?;
                for (face, fm) in Face::ALL.iter().zip(cube.faces()) {
                    let p = face_path(&a.output, *face)?;
                    save_mask(&p, fm)?;
                    written.push(p);
                }
            } else {
                let eq = EquirectImage::new(decode_rgb(Path::new(&a.input))?)?;
                let cube = equirect_to_cubemap(&eq, a.face_size.unwrap_or(eq.height()), a.filter)?;
                for (face, img) in Face::ALL.iter().zip(cube.faces()) {
                    let p = face_path(&a.output, *face)?;
                    save_rgb(&p, img)?;
                    written.push(p);
                }
            }
            Ok(json!({ "written": written }))
        }
        Target::Equirect => {
            let out = PathBuf::from(&a.output);
            let paths = Face::ALL.map(|f| face_path(&a.input, f));
            let paths = paths.into_iter().collect::<Result<Vec<_>>>()?;
            if a.mask {
                let faces = paths.iter().map(|p| load_mask(p)).collect::<Result<Vec<_>>>()?;
                let cube = CubeMask::new(faces)?;
                let w = a.width.unwrap_or(2 * cube.face_size());
                save_mask(&out, &cubemask_to_equirect(&cube, w, w / 2)?)?;
            } else {
                let faces = paths.iter().map(|p| decode_rgb(p)).collect::<Result<Vec<_>>>()?;
                let cube = CubeMap::new(faces)?;
                let w = a.width.unwrap_or(2 * cube.face_size());
                save_rgb(&out, cubemap_to_equirect(&cube, w, w / 2, a.filter)?.image())?;
            }
            Ok(json!({ "written": [out] }))
        }
    }
}

fn masks(a: MaskArgs) -> Result<serde_json::Value> {
    let mut rects = Vec::new();
    for i in 0..a.count {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(a.seed, i));
        let (m, rect) = sample_rect_mask(&mut rng, a.width, a.height)?;
        save_mask(&a.out.join(format!("mask-{i:04}.png")), &m)?;
        if let Some(s) = a.face_size {
            let cube = mask_to_cubemap(&m, s)?;
            for (face, fm) in Face::ALL.iter().zip(cube.faces()) {
                save_mask(&a.out.join(format!("mask-{i:04}_{}.png", face.letter())), fm)?;
            }
        }
        rects.push(rect);
    }
    let text = serde_json::to_string_pretty(&rects).expect("rects serialise");
    write_atomic(&a.out.join("masks.json"), text.as_bytes())?;
    Ok(json!({ "count": a.count, "rects": rects }))
}

fn report_skips(skipped: &[SkipEntry]) {
    for s in skipped {
        eprintln!("{}", json!({ "skipped": s.path, "reason": s.reason }));
    }
}

fn load_dataset(data: &DataArgs, split: Split, options: &PreprocessOptions, seed: u64) -> Result<Vec<TrainingSample>> {
    let manifest = ingest(&data.data, split, data.category)?;
    report_skips(&manifest.skipped);
    let (samples, skipped) = load_samples(&manifest, options, seed)?;
    report_skips(&skipped);
    if samples.is_empty() {
        return Err(Error::Validation(format!("no usable images in {}", data.data.display())));
    }
    Ok(samples)
}

fn run_train(a: TrainArgs) -> Result<serde_json::Value> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { c.$f = v; })* };
    }
    set!(
        learning_rate,
        batch_size,
        face_size,
        max_steps,
        seed,
        checkpoint_interval,
        critic_steps_per_gen_step,
        equirect_width
    );
    c.validate()?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let options = PreprocessOptions {
        equirect_width: c.equirect_width,
        face_size: c.face_size,
        fill: c.fill,
    };
    let samples = load_dataset(&a.data, Split::Train, &options, c.seed)?;
    let config_text = toml::to_string(&c).expect("config serialises");
    write_atomic(&a.out.join("config.toml"), config_text.as_bytes())?;
    match train(&c, &samples, &a.out, resume.as_ref()) {
        Ok(report) => Ok(json!({
            "steps": report.state.step,
            "images": samples.len(),
            "checkpoints": report.checkpoints,
            "last": report.records.last(),
        })),
        Err(failure) => {
            if let Some(r) = &failure.report {
                eprintln!("{}", json!({ "stopped_at_step": r.state.step, "checkpoints": r.checkpoints }));
            }
            Err(failure.error)
        }
    }
}

fn run_infer(a: InferArgs) -> Result<serde_json::Value> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let generator = generator_from_checkpoint(&ckpt)?;
    let eq = EquirectImage::new(decode_rgb(&a.input)?)?;
    let mask = match (&a.mask, a.rect) {
        (Some(p), _) => load_mask(p)?,
        (None, Some(r)) => {
            r.check_inside(eq.width(), eq.height())?;
            r.to_mask(eq.width(), eq.height())
        }
        (None, None) => unreachable!("clap requires --mask or --rect"),
    };
    let s = a.face_size.unwrap_or(ckpt.whole.face_size);
    let out = infer(&generator, &eq, &mask, s, a.fill)?;
    save_rgb(&a.out, out.image())?;
    Ok(json!({ "written": [a.out], "holes": mask.hole_count() }))
}

struct Model {
    generator: Option<Generator<f32>>,
    face_size: usize,
}

impl ModelArgs {
    fn load(&self) -> Result<Model> {
        let ckpt = match (self.method, &self.checkpoint) {
            (Method::Checkpoint, Some(p)) => Some(Checkpoint::load(p)?),
            _ => None,
        };
        let face_size = self
            .face_size
            .or(ckpt.as_ref().map(|c| c.whole.face_size))
            .unwrap_or(256);
        let generator = ckpt.as_ref().map(generator_from_checkpoint).transpose()?;
        Ok(Model { generator, face_size })
    }

    fn samples(&self, face_size: usize) -> Result<Vec<TrainingSample>> {
        let options = PreprocessOptions {
            equirect_width: self.equirect_width,
            face_size,
            fill: self.fill,
        };
        load_dataset(&self.data, Split::Eval, &options, self.seed)
    }
}

impl Model {
    fn inpainter(&self, method: Method) -> Box<dyn Inpainter + '_> {
        match (method, &self.generator) {
            (Method::Identity, _) => Box::new(IdentityInpainter),
            (Method::Gray, _) => Box::new(GrayInpainter),
            (Method::Checkpoint, Some(g)) => Box::new(GeneratorInpainter(g)),
            (Method::Checkpoint, None) => unreachable!("clap requires --checkpoint"),
        }
    }
}

fn run_evaluate(a: EvaluateArgs) -> Result<serde_json::Value> {
    let model = a.model.load()?;
    let samples = a.model.samples(model.face_size)?;
    let options = EvalOptions {
        domain: a.model.domain,
        region: a.region,
    };
    let report = evaluate(model.inpainter(a.model.method).as_ref(), &samples, options)?;
    report.save(a.csv.as_deref(), a.json.as_deref())?;
    if a.csv.is_none() && a.json.is_none() {
        print!("{}", report.to_csv()?);
        return Ok(serde_json::Value::Null);
    }
    Ok(serde_json::to_value(report.summary).expect("summary serialises"))
}

fn run_grid(a: GridArgs) -> Result<serde_json::Value> {
    let model = a.model.load()?;
    let mut samples = a.model.samples(model.face_size)?;
    samples.truncate(a.limit.max(1));
    let grid = comparison_grid(model.inpainter(a.model.method).as_ref(), &samples, a.model.domain)?;
    save_grid(&a.out, &grid)?;
    Ok(json!({ "written": [a.out], "rows": samples.len() }))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Convert(a) => convert(a),
        Command::Mask(a) => masks(a),
        Command::Train(a) => run_train(a),
        Command::Infer(a) => run_infer(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Grid(a) => run_grid(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
