use std::fmt::Display;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use nmt_simplify::align::{align_corpus, train_aligner, AlignerConfig};
use nmt_simplify::beam::{format_nbest, translate_corpus, DecodeConfig};
use nmt_simplify::config::KvConfig;
use nmt_simplify::corpus::{filter_parallel, tokenize, FilterConfig, ParallelCorpus, RawBitext, TargetKind, TokenizerConfig, Vocabulary};
use nmt_simplify::distill::{analyze, run_pipeline, DistillPlan, PipelineData, PipelineOptions};
use nmt_simplify::io::{join_tokens, read_lines, read_token_lines, write_lines_atomic};
use nmt_simplify::metrics::bleu;
use nmt_simplify::nmt::ModelConfig;
use nmt_simplify::synth::{generate, SynthConfig};
use nmt_simplify::trainer::{train, TrainConfig, TrainOptions};
use nmt_simplify::Model;

use crate::manifest::RunManifest;
use crate::{Cli, Command};

/// Command-line values layered over a config file.
#[derive(Default)]
struct Overrides(KvConfig);

impl Overrides {
    fn put<T: Display>(&mut self, key: &str, value: &Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.set(key, v);
        }
        self
    }

    /// File entries with flags on top.
    fn resolve(&self, file: Option<&Path>, manifest: &mut RunManifest) -> Result<KvConfig> {
        let base = match file {
            Some(path) => {
                manifest.input(path)?;
                KvConfig::load(path)?
            }
            None => KvConfig::new(),
        };
        Ok(base.merged(&self.0))
    }
}

const UNBOUNDED: usize = usize::MAX;

fn encode_bitext(src: &[Vec<String>], tgt: &[Vec<String>], kind: TargetKind) -> Result<(ParallelCorpus, Vocabulary, Vocabulary)> {
    let sv = Vocabulary::build(src.iter().map(Vec::as_slice), UNBOUNDED);
    let tv = Vocabulary::build(tgt.iter().map(Vec::as_slice), UNBOUNDED);
    let (corpus, _, _) = ParallelCorpus::encode(src, tgt, &sv, &tv, kind)?;
    Ok((corpus, sv, tv))
}

fn read_inputs(manifest: &mut RunManifest, path: &Path) -> Result<Vec<Vec<String>>> {
    manifest.input(path)?;
    Ok(read_token_lines(path)?)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(cli: &Cli) -> Result<()> {
    let threads = cli.threads as usize;
    let (name, default_manifest) = match &cli.command {
        Command::Tokenize(a) => ("tokenize", sibling(&a.output, ".manifest")),
        Command::Filter(a) => ("filter", sibling(&a.out_src, ".manifest")),
        Command::Vocab(a) => ("vocab", sibling(&a.output, ".manifest")),
        Command::Train(a) => ("train", a.out_dir.join("manifest.txt")),
        Command::Translate(a) => ("translate", sibling(&a.output, ".manifest")),
        Command::Align(a) => ("align", sibling(&a.output, ".manifest")),
        Command::Analyze(a) => ("analyze", a.out_dir.join("manifest.txt")),
        Command::Bleu(a) => ("bleu", sibling(&a.hyp, ".bleu.manifest")),
        Command::Distill(a) => ("distill", a.out_dir.join("manifest.txt")),
        Command::Synth(a) => ("synth", a.out_dir.join("manifest.txt")),
    };
    let mut m = RunManifest::new(name, cli.seed, threads);
    match &cli.command {
        Command::Tokenize(a) => a.run(&mut m)?,
        Command::Filter(a) => a.run(&mut m)?,
        Command::Vocab(a) => a.run(&mut m)?,
        Command::Train(a) => a.run(cli.seed, &mut m)?,
        Command::Translate(a) => a.run(&mut m)?,
        Command::Align(a) => a.run(&mut m)?,
        Command::Analyze(a) => a.run(&mut m)?,
        Command::Bleu(a) => a.run(&mut m)?,
        Command::Distill(a) => a.run(cli.seed, &mut m)?,
        Command::Synth(a) => a.run(cli.seed, &mut m)?,
    }
    m.write(cli.manifest.as_deref().unwrap_or(&default_manifest))
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Tokenizer rules (`isolate`, `extra_chars`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated character classes to split off: ascii_punct, unicode_punct, digit.
    #[arg(long)]
    pub isolate: Option<String>,
    #[arg(long)]
    pub extra_chars: Option<String>,
}

impl TokenizeArgs {
    fn run(&self, m: &mut RunManifest) -> Result<()> {
        let cfg = Overrides::default()
            .put("isolate", &self.isolate)
            .put("extra_chars", &self.extra_chars)
            .resolve(self.config.as_deref(), m)?;
        let rules = TokenizerConfig::from_kv(&cfg)?;
        m.input(&self.input)?;
        let lines: Vec<String> = read_lines(&self.input)?
            .iter()
            .map(|l| join_tokens(&tokenize(l, &rules)))
            .collect();
        write_lines_atomic(&self.output, &lines)?;
        m.config = cfg;
        m.output(&self.output);
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long)]
    pub out_src: PathBuf,
    #[arg(long)]
    pub out_tgt: PathBuf,
    /// Filter settings (`max_length`, `ratio_bound`, `drop_empty`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_length: Option<usize>,
    #[arg(long)]
    pub ratio_bound: Option<f64>,
    #[arg(long)]
    pub drop_empty: Option<bool>,
}

impl FilterArgs {
    fn run(&self, m: &mut RunManifest) -> Result<()> {
        let cfg = Overrides::default()
            .put("max_length", &self.max_length)
            .put("ratio_bound", &self.ratio_bound)
            .put("drop_empty", &self.drop_empty)
            .resolve(self.config.as_deref(), m)?;
        let filter = FilterConfig::from_kv(&cfg)?;
        m.input(&self.src)?;
        m.input(&self.tgt)?;
        let bitext = RawBitext::read(&self.src, &self.tgt)?;
        let kept = filter_parallel(&bitext, &filter)?;
        let (src, tgt): (Vec<_>, Vec<_>) = kept.pairs.into_iter().unzip();
        write_lines_atomic(&self.out_src, &src)?;
        write_lines_atomic(&self.out_tgt, &tgt)?;
        eprintln!("kept {} of {} pairs", src.len(), bitext.len());
        m.config = cfg;
        m.output(&self.out_src);
        m.output(&self.out_tgt);
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Tokenized text.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Most frequent types kept, reserved symbols excluded.
    #[arg(long, default_value_t = 50_000)]
    pub max_size: usize,
}

impl VocabArgs {
    fn run(&self, m: &mut RunManifest) -> Result<()> {
        let lines = read_inputs(m, &self.input)?;
        let vocab = Vocabulary::build(lines.iter().map(Vec::as_slice), self.max_size);
        vocab.save(&self.output)?;
        m.config.set("max_size", self.max_size);
        m.output(&self.output);
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, requires = "valid_tgt")]
    pub valid_src: Option<PathBuf>,
    #[arg(long, requires = "valid_src")]
    pub valid_tgt: Option<PathBuf>,
    /// Built from the training data when absent.
    #[arg(long)]
    pub src_vocab: Option<PathBuf>,
    #[arg(long)]
    pub tgt_vocab: Option<PathBuf>,
    /// Checkpoints, history and the final model.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Model and training settings; keys match the flag names with `_`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub embed_size: Option<usize>,
    #[arg(long)]
    pub dropout_p: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub decay_start_epoch: Option<usize>,
    /// `per_epoch` or `one_shot`.
    #[arg(long)]
    pub decay_mode: Option<String>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub bucket: Option<bool>,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    #[arg(long)]
    pub verbose: bool,
}

fn load_or_build_vocab(m: &mut RunManifest, path: Option<&Path>, data: &[Vec<String>], max: usize) -> Result<Vocabulary> {
    match path {
        Some(p) => {
            m.input(p)?;
            Ok(Vocabulary::load(p)?)
        }
        None => Ok(Vocabulary::build(data.iter().map(Vec::as_slice), max)),
    }
}

impl TrainArgs {
    fn run(&self, seed: Option<u64>, m: &mut RunManifest) -> Result<()> {
        let cfg = Overrides::default()
            .put("layers", &self.layers)
            .put("hidden_size", &self.hidden_size)
            .put("embed_size", &self.embed_size)
            .put("dropout_p", &self.dropout_p)
            .put("epochs", &self.epochs)
            .put("batch_size", &self.batch_size)
            .put("lr0", &self.lr0)
            .put("decay", &self.decay)
            .put("decay_start_epoch", &self.decay_start_epoch)
            .put("decay_mode", &self.decay_mode)
            .put("grad_clip", &self.grad_clip)
            .put("bucket", &self.bucket)
            .put("seed", &seed)
            .put("max_vocab", &self.max_vocab)
            .resolve(self.config.as_deref(), m)?;
        let max_vocab = cfg.get_or("max_vocab", 50_000usize)?;
        let src = read_inputs(m, &self.src)?;
        let tgt = read_inputs(m, &self.tgt)?;
        let sv = load_or_build_vocab(m, self.src_vocab.as_deref(), &src, max_vocab)?;
        let tv = load_or_build_vocab(m, self.tgt_vocab.as_deref(), &tgt, max_vocab)?;
        let (corpus, src_oov, tgt_oov) = ParallelCorpus::encode(&src, &tgt, &sv, &tv, TargetKind::Reference)?;
        if self.verbose {
            eprintln!("{} pairs, {src_oov} / {tgt_oov} unknown tokens", corpus.len());
        }
        let valid = match (&self.valid_src, &self.valid_tgt) {
            (Some(vs), Some(vt)) => {
                let (s, t) = (read_inputs(m, vs)?, read_inputs(m, vt)?);
                ParallelCorpus::encode(&s, &t, &sv, &tv, TargetKind::Reference)?.0
            }
            _ => ParallelCorpus::new(Vec::new(), TargetKind::Reference),
        };

        let mut model_cfg = ModelConfig::from_kv(&cfg, &ModelConfig::default())?;
        model_cfg.src_vocab = sv.len();
        model_cfg.tgt_vocab = tv.len();
        let train_cfg = TrainConfig::from_kv(&cfg, &TrainConfig::default())?;
        std::fs::create_dir_all(&self.out_dir).with_context(|| self.out_dir.display().to_string())?;
        let opts = TrainOptions {
            out_dir: Some(self.out_dir.clone()),
            verbose: self.verbose,
        };
        let (model, history) = train::<f64>(&corpus, &valid, &model_cfg, &train_cfg, &opts)?;

        let final_path = self.out_dir.join("final.model");
        model.save(&final_path)?;
        for (name, vocab) in [("src.vocab", &sv), ("tgt.vocab", &tv)] {
            let path = self.out_dir.join(name);
            vocab.save(&path)?;
            m.output(path);
        }
        m.output(final_path);
        m.output(self.out_dir.join("best.model"));
        m.output(self.out_dir.join("history.tsv"));
        let mut resolved = KvConfig::new();
        model_cfg.to_kv("", &mut resolved);
        train_cfg.to_kv("", &mut resolved);
        resolved.set("max_vocab", max_vocab);
        resolved.set("best_epoch", history.best_epoch);
        m.config = resolved;
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct DecodeFlags {
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub max_len_factor: Option<f64>,
    #[arg(long)]
    pub max_len_offset: Option<usize>,
    /// `allow` or `suppress`.
    #[arg(long)]
    pub unk_policy: Option<String>,
    /// Rank finished hypotheses by per-token score.
    #[arg(long)]
    pub normalize: Option<bool>,
}

impl DecodeFlags {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.put("beam_size", &self.beam_size)
            .put("max_len_factor", &self.max_len_factor)
            .put("max_len_offset", &self.max_len_offset)
            .put("unk_policy", &self.unk_policy)
            .put("normalize", &self.normalize);
        o
    }
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub src_vocab: PathBuf,
    #[arg(long)]
    pub tgt_vocab: PathBuf,
    /// Tokenized source text.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Also write every beam as `index ||| hypothesis ||| score`.
    #[arg(long)]
    pub nbest: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

impl TranslateArgs {
    fn run(&self, m: &mut RunManifest) -> Result<()> {
        let cfg = self.decode.overrides().resolve(self.config.as_deref(), m)?;
        let decode = DecodeConfig::from_kv(&cfg, &DecodeConfig::default())?;
        m.input(&self.model)?;
        m.input(&self.src_vocab)?;
        m.input(&self.tgt_vocab)?;
        let model = Model::load(&self.model)?;
        let (sv, tv) = (Vocabulary::load(&self.src_vocab)?, Vocabulary::load(&self.tgt_vocab)?);
        if sv.len() != model.config.src_vocab || tv.len() != model.config.tgt_vocab {
            bail!(
                "vocabulary sizes {} / {} do not match the model's {} / {}",
                sv.len(),
                tv.len(),
                model.config.src_vocab,
                model.config.tgt_vocab
            );
        }
        let sources: Vec<_> = read_inputs(m, &self.input)?.iter().map(|s| sv.encode(s).0).collect();
        let decoded = translate_corpus(&model, &sources, &decode);
        let mut lines = Vec::with_capacity(decoded.len());
        let mut nbest = Vec::new();
        for (i, d) in decoded.iter().enumerate() {
            if let Some(msg) = &d.diagnostic {
                eprintln!("line {}: {msg}", i + 1);
            }
            lines.push(join_tokens(&tv.decode(&d.tokens())?));
            if let Some(r) = &d.result {
                nbest.extend(format_nbest(i, &r.nbest, &tv)?);
            }
        }
        write_lines_atomic(&self.output, &lines)?;
        m.output(&self.output);
        if let Some(path) = &self.nbest {
            write_lines_atomic(path, &nbest)?;
            m.output(path);
        }
        let mut resolved = KvConfig::new();
        decode.to_kv("", &mut resolved);
        m.config = resolved;
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct AlignFlags {
    /// Lexical-only EM iterations before the position prior is switched on.
    #[arg(long)]
    pub iters_m1: Option<usize>,
    #[arg(long)]
    pub iters_m2: Option<usize>,
    /// Sharpness of the diagonal prior.
    #[arg(long)]
    pub lambda: Option<f64>,
}

impl AlignFlags {
    fn resolve(&self, file: Option<&Path>, m: &mut RunManifest) -> Result<AlignerConfig> {
        let cfg = Overrides::default()
            .put("iters_m1", &self.iters_m1)
            .put("iters_m2", &self.iters_m2)
            .put("lambda", &self.lambda)
            .resolve(file, m)?;
        let aligner = AlignerConfig::from_kv(&cfg, &AlignerConfig::default())?;
        let mut resolved = KvConfig::new();
        aligner.to_kv("", &mut resolved);
        m.config = resolved;
        Ok(aligner)
    }
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub aligner: AlignFlags,
}

impl AlignArgs {
    fn run(&self, m: &mut RunManifest) -> Result<()> {
        let cfg = self.aligner.resolve(self.config.as_deref(), m)?;
        let src = read_inputs(m, &self.src)?;
        let tgt = read_inputs(m, &self.tgt)?;
        let (corpus, _, _) = encode_bitext(&src, &tgt, TargetKind::Reference)?;
        let aligner = train_aligner(&corpus, &cfg)?;
        let lines: Vec<String> = align_corpus(&corpus, &aligner).iter().map(ToString::to_string).collect();
        write_lines_atomic(&self.output, &lines)?;
        m.output(&self.output);
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub hyp: PathBuf,
    /// Plot-data files for the length and crossing reports.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub aligner: AlignFlags,
}

impl AnalyzeArgs {
    fn run(&self, m: &mut RunManifest) -> Result<()> {
        let cfg = self.aligner.resolve(self.config.as_deref(), m)?;
        let src = read_inputs(m, &self.src)?;
        let refs = read_inputs(m, &self.reference)?;
        let hyps = read_inputs(m, &self.hyp)?;
        let sv = Vocabulary::build(src.iter().map(Vec::as_slice), UNBOUNDED);
        let tv = Vocabulary::build(refs.iter().chain(&hyps).map(Vec::as_slice), UNBOUNDED);
        let (r, _, _) = ParallelCorpus::encode(&src, &refs, &sv, &tv, TargetKind::Reference)?;
        let (h, _, _) = ParallelCorpus::encode(&src, &hyps, &sv, &tv, TargetKind::Hypothesis)?;
        let analysis = analyze(&r, &h, &cfg)?;
        for path in analysis.write(&self.out_dir)? {
            m.output(path);
        }
        println!(
            "length-diff bin 0: ref {:.2}% hyp {:.2}%",
            analysis.ref_length.percent(0),
            analysis.hyp_length.percent(0)
        );
        println!(
            "zero crossings:    ref {:.2}% hyp {:.2}%",
            analysis.ref_crossings.percent(0),
            analysis.hyp_crossings.percent(0)
        );
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct BleuArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

impl BleuArgs {
    fn run(&self, m: &mut RunManifest) -> Result<()> {
        let hyps = read_inputs(m, &self.hyp)?;
        let refs = read_inputs(m, &self.reference)?;
        let report = bleu(&hyps, &refs)?;
        println!("{}", report.line());
        m.config.set("bleu", format!("{:.6}", report.bleu));
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Plan file; data paths may be given under `[data]` as
    /// `train_src`, `train_tgt`, `valid_src`, `valid_tgt`, `test_src`, `test_tgt`.
    #[arg(long)]
    pub plan: PathBuf,
    /// Reports, distilled data and per-stage checkpoints.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub train_src: Option<PathBuf>,
    #[arg(long)]
    pub train_tgt: Option<PathBuf>,
    #[arg(long)]
    pub valid_src: Option<PathBuf>,
    #[arg(long)]
    pub valid_tgt: Option<PathBuf>,
    #[arg(long)]
    pub test_src: Option<PathBuf>,
    #[arg(long)]
    pub test_tgt: Option<PathBuf>,
    #[arg(long)]
    pub verbose: bool,
}

impl DistillArgs {
    fn run(&self, seed: Option<u64>, m: &mut RunManifest) -> Result<()> {
        let mut o = Overrides::default();
        for (key, value) in [
            ("train_src", &self.train_src),
            ("train_tgt", &self.train_tgt),
            ("valid_src", &self.valid_src),
            ("valid_tgt", &self.valid_tgt),
            ("test_src", &self.test_src),
            ("test_tgt", &self.test_tgt),
        ] {
            o.put(&format!("data.{key}"), &value.as_ref().map(|p| p.display()));
        }
        o.put("seeds", &seed);
        let cfg = o.resolve(Some(&self.plan), m)?;
        let plan = DistillPlan::from_kv(&cfg)?;
        let data_cfg = cfg.section("data");
        let mut split = |side: &str| -> Result<(Vec<Vec<String>>, Vec<Vec<String>>)> {
            let path = |k: String| -> Result<PathBuf> {
                data_cfg
                    .raw(&k)
                    .map(PathBuf::from)
                    .with_context(|| format!("no path for data.{k} in the plan or flags"))
            };
            let s = read_inputs(m, &path(format!("{side}_src"))?)?;
            let t = read_inputs(m, &path(format!("{side}_tgt"))?)?;
            Ok((s, t))
        };
        let (train, valid, test) = (split("train")?, split("valid")?, split("test")?);
        let data = PipelineData::from_tokens(&train, &valid, &test, plan.max_vocab)?;
        let opts = PipelineOptions {
            out_dir: Some(self.out_dir.clone()),
            verbose: self.verbose,
        };
        let report = run_pipeline(&plan, &data, &opts)?;
        print!("{}", report.render());
        for name in ["report.tsv", "report.txt", "plan.cfg"] {
            m.output(self.out_dir.join(name));
        }
        for s in &report.seeds {
            m.output(self.out_dir.join(format!("seed_{}", s.seed)));
        }
        let mut resolved = plan.to_kv();
        for (k, v) in data_cfg.iter() {
            resolved.set(format!("data.{k}"), v);
        }
        m.config = resolved;
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Generator settings; keys match the flag names with `_`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub sentence_count: Option<usize>,
    #[arg(long)]
    pub valid_count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Probability that a reference is a free rendering.
    #[arg(long)]
    pub free_prob: Option<f64>,
    #[arg(long)]
    pub reorder_window: Option<usize>,
}

impl SynthArgs {
    fn run(&self, seed: Option<u64>, m: &mut RunManifest) -> Result<()> {
        let cfg = Overrides::default()
            .put("vocab_size", &self.vocab_size)
            .put("sentence_count", &self.sentence_count)
            .put("valid_count", &self.valid_count)
            .put("test_count", &self.test_count)
            .put("free_prob", &self.free_prob)
            .put("reorder_window", &self.reorder_window)
            .put("seed", &seed)
            .resolve(self.config.as_deref(), m)?;
        let synth = SynthConfig::from_kv(&cfg, &SynthConfig::default())?;
        let data = generate(&synth)?;
        for path in data.write(&self.out_dir)? {
            m.output(path);
        }
        let mut resolved = KvConfig::new();
        synth.to_kv("", &mut resolved);
        m.config = resolved;
        Ok(())
    }
}
