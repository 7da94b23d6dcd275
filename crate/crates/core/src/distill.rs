//! The teacher / re-translation / student pipeline and its R, A and R+A
//! training configurations.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::align::{
    align_corpus, crossing_difference, crossing_distribution, train_aligner, AlignerConfig,
    MAX_CROSSINGS,
};
use crate::beam::{translate_corpus, DecodeConfig};
use crate::config::KvConfig;
use crate::corpus::{ParallelCorpus, SentencePair, TargetKind, Vocabulary};
use crate::error::{Error, Result};
use crate::io::{join_tokens, write_atomic, write_lines_atomic};
use crate::metrics::{
    bleu, emit_plot_data, length_diff_histogram, BleuReport, Curve, Histogram, MetricReport,
};
use crate::nmt::{Model, ModelConfig};
use crate::tensor::Rng;
use crate::trainer::{train, TrainConfig, TrainHistory, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DataMode {
    R,
    A,
    RPlusA,
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataMode::R => "R",
            DataMode::A => "A",
            DataMode::RPlusA => "R+A",
        })
    }
}

impl FromStr for DataMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" => Ok(DataMode::R),
            "A" => Ok(DataMode::A),
            "R+A" | "R_plus_A" => Ok(DataMode::RPlusA),
            other => Err(Error::Config(format!("unknown data_mode {other}"))),
        }
    }
}

/// Architecture and optimizer settings of one trained network.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl StageConfig {
    fn from_kv(cfg: &KvConfig, base: &StageConfig) -> Result<Self> {
        Ok(Self {
            model: ModelConfig::from_kv(cfg, &base.model)?,
            train: TrainConfig::from_kv(cfg, &base.train)?,
        })
    }

    fn to_kv(&self, prefix: &str, out: &mut KvConfig) {
        self.model.to_kv(prefix, out);
        self.train.to_kv(prefix, out);
    }

    fn for_data(&self, src_vocab: usize, tgt_vocab: usize, seed: u64) -> StageConfig {
        let mut s = self.clone();
        s.model.src_vocab = src_vocab;
        s.model.tgt_vocab = tgt_vocab;
        s.train.seed = seed;
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillPlan {
    pub teacher: StageConfig,
    /// Same architecture as the teacher-small row; used for A students.
    pub student: StageConfig,
    /// The R+A network, by default shaped like the teacher.
    pub combined: StageConfig,
    pub decode: DecodeConfig,
    pub aligner: AlignerConfig,
    /// Training data of a standalone student run.
    pub data_mode: DataMode,
    pub seeds: Vec<u64>,
    /// Rebuild the student target vocabulary from its training targets
    /// instead of reusing the teacher's.
    pub rebuild_vocab: bool,
    pub max_vocab: usize,
}

impl Default for DistillPlan {
    fn default() -> Self {
        let teacher = StageConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        };
        let mut student = teacher.clone();
        student.model.layers = (teacher.model.layers / 2).max(1);
        Self {
            combined: teacher.clone(),
            teacher,
            student,
            decode: DecodeConfig::default(),
            aligner: AlignerConfig::default(),
            data_mode: DataMode::A,
            seeds: vec![1, 2, 3],
            rebuild_vocab: false,
            max_vocab: 50_000,
        }
    }
}

impl DistillPlan {
    /// Reads a plan: `[teacher]`, `[student]`, `[combined]`, `[decode]` and
    /// `[align]` sections plus top-level `data_mode`, `seeds` (comma
    /// separated), `rebuild_vocab` and `max_vocab`. Student keys fall back to
    /// the teacher's, with half its layers; combined keys fall back to the
    /// teacher's.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        let base = Self::default();
        let teacher = StageConfig::from_kv(&cfg.section("teacher"), &base.teacher)?;
        let mut student_base = teacher.clone();
        student_base.model.layers = (teacher.model.layers / 2).max(1);
        let student = StageConfig::from_kv(&cfg.section("student"), &student_base)?;
        let combined = StageConfig::from_kv(&cfg.section("combined"), &teacher)?;
        let seeds = match cfg.raw("seeds") {
            None => base.seeds,
            Some(s) => s
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed {x}")))
                })
                .collect::<Result<Vec<u64>>>()?,
        };
        if seeds.is_empty() {
            return Err(Error::Config("a plan needs at least one seed".into()));
        }
        Ok(Self {
            teacher,
            student,
            combined,
            decode: DecodeConfig::from_kv(&cfg.section("decode"), &base.decode)?,
            aligner: AlignerConfig::from_kv(&cfg.section("align"), &base.aligner)?,
            data_mode: cfg
                .get_or("data_mode", base.data_mode.to_string())?
                .parse()?,
            seeds,
            rebuild_vocab: cfg.get_or("rebuild_vocab", base.rebuild_vocab)?,
            max_vocab: cfg.get_or("max_vocab", base.max_vocab)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvConfig::load(path)?)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut out = KvConfig::new();
        self.teacher.to_kv("teacher.", &mut out);
        self.student.to_kv("student.", &mut out);
        self.combined.to_kv("combined.", &mut out);
        self.decode.to_kv("decode.", &mut out);
        self.aligner.to_kv("align.", &mut out);
        out.set("data_mode", self.data_mode);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        out.set("seeds", seeds.join(","));
        out.set("rebuild_vocab", self.rebuild_vocab);
        out.set("max_vocab", self.max_vocab);
        out
    }
}

/// A trained network with its provenance.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model<f64>,
    pub history: TrainHistory,
    pub fingerprint: String,
}

fn train_stage(
    corpus: &ParallelCorpus,
    valid: &ParallelCorpus,
    stage: &StageConfig,
    out_dir: Option<PathBuf>,
    verbose: bool,
) -> Result<TrainedModel> {
    let opts = TrainOptions { out_dir, verbose };
    let (model, history) = train::<f64>(corpus, valid, &stage.model, &stage.train, &opts)?;
    Ok(TrainedModel {
        fingerprint: model.fingerprint(),
        model,
        history,
    })
}

/// Trains on reference targets; the final model is saved as `final.model`
/// under `out_dir` when given.
pub fn train_teacher(
    bitext: &ParallelCorpus,
    valid: &ParallelCorpus,
    stage: &StageConfig,
    out_dir: Option<&Path>,
    verbose: bool,
) -> Result<TrainedModel> {
    if bitext.target_kind != TargetKind::Reference {
        return Err(Error::Config(
            "the teacher must be trained on reference targets".into(),
        ));
    }
    let t = train_stage(
        bitext,
        valid,
        stage,
        out_dir.map(Path::to_path_buf),
        verbose,
    )?;
    if let Some(dir) = out_dir {
        t.model.save(&dir.join("final.model"))?;
    }
    Ok(t)
}

/// Teacher translations of a training set, line-parallel to the kept pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledCorpus {
    pub corpus: ParallelCorpus,
    /// Index in the original bitext of every kept pair.
    pub kept: Vec<usize>,
    pub dropped: usize,
    pub teacher_fingerprint: String,
    /// `(index, message)` for sentences that failed to decode.
    pub diagnostics: Vec<(usize, String)>,
}

/// Beam-decodes every training source with the teacher, dropping empty or
/// failed hypotheses together with their sources.
pub fn decode_training_set(
    teacher: &Model<f64>,
    teacher_fingerprint: &str,
    bitext: &ParallelCorpus,
    cfg: &DecodeConfig,
) -> DistilledCorpus {
    let decoded = translate_corpus(teacher, &bitext.sources(), cfg);
    let mut pairs = Vec::new();
    let mut kept = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, (d, p)) in decoded.into_iter().zip(&bitext.pairs).enumerate() {
        if let Some(msg) = d.diagnostic.clone() {
            diagnostics.push((i, msg));
        }
        let target = d.tokens();
        if target.is_empty() {
            continue;
        }
        pairs.push(SentencePair {
            source: p.source.clone(),
            target,
        });
        kept.push(i);
    }
    DistilledCorpus {
        dropped: bitext.len() - kept.len(),
        corpus: ParallelCorpus::new(pairs, TargetKind::Hypothesis),
        kept,
        teacher_fingerprint: teacher_fingerprint.to_string(),
        diagnostics,
    }
}

/// Training data for `mode`. R+A holds every reference and every distilled
/// pair once, interleaved by a `seed`-determined shuffle.
pub fn assemble(
    mode: DataMode,
    references: &ParallelCorpus,
    distilled: &DistilledCorpus,
    seed: u64,
) -> Result<ParallelCorpus> {
    for (k, &i) in distilled.kept.iter().enumerate() {
        let same = references
            .pairs
            .get(i)
            .is_some_and(|r| r.source == distilled.corpus.pairs[k].source);
        if !same {
            return Err(Error::SourceMismatch(i));
        }
    }
    Ok(match mode {
        DataMode::R => references.clone(),
        DataMode::A => distilled.corpus.clone(),
        DataMode::RPlusA => {
            let mut pairs: Vec<SentencePair> = references
                .pairs
                .iter()
                .chain(&distilled.corpus.pairs)
                .cloned()
                .collect();
            Rng::new(seed).derive(0xa55e).shuffle(&mut pairs);
            ParallelCorpus::new(pairs, TargetKind::Mixed)
        }
    })
}

/// Re-encodes `corpus` targets (ids of `vocab`) against a vocabulary built
/// from those targets.
pub fn rebuild_target_vocab(
    corpus: &ParallelCorpus,
    vocab: &Vocabulary,
    max_size: usize,
) -> Result<(ParallelCorpus, Vocabulary)> {
    let targets = corpus.target_tokens(vocab)?;
    let fresh = Vocabulary::build(targets.iter().map(Vec::as_slice), max_size);
    let pairs = corpus
        .pairs
        .iter()
        .zip(&targets)
        .map(|(p, t)| SentencePair {
            source: p.source.clone(),
            target: fresh.encode(t).0,
        })
        .collect();
    Ok((ParallelCorpus::new(pairs, corpus.target_kind), fresh))
}

/// Encoded splits plus the tokenized references BLEU is computed against.
#[derive(Clone, Debug)]
pub struct PipelineData {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
    pub valid_refs: Vec<Vec<String>>,
    pub test_refs: Vec<Vec<String>>,
}

/// Tokenized `(source, target)` sentences of one split.
pub type TokenSplit = (Vec<Vec<String>>, Vec<Vec<String>>);

impl PipelineData {
    /// Builds vocabularies from the training split and encodes all splits.
    pub fn from_tokens(
        train: &TokenSplit,
        valid: &TokenSplit,
        test: &TokenSplit,
        max_vocab: usize,
    ) -> Result<Self> {
        let src_vocab = Vocabulary::build(train.0.iter().map(Vec::as_slice), max_vocab);
        let tgt_vocab = Vocabulary::build(train.1.iter().map(Vec::as_slice), max_vocab);
        let enc = |s: &TokenSplit| {
            ParallelCorpus::encode(&s.0, &s.1, &src_vocab, &tgt_vocab, TargetKind::Reference)
                .map(|r| r.0)
        };
        Ok(Self {
            train: enc(train)?,
            valid: enc(valid)?,
            test: enc(test)?,
            valid_refs: valid.1.clone(),
            test_refs: test.1.clone(),
            src_vocab,
            tgt_vocab,
        })
    }
}

/// Beam-decodes `corpus` sources and scores them against `refs`; failed
/// sentences count as empty hypotheses.
pub fn evaluate_bleu(
    model: &Model<f64>,
    corpus: &ParallelCorpus,
    refs: &[Vec<String>],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<(BleuReport, Vec<Vec<String>>)> {
    let hyps = translate_corpus(model, &corpus.sources(), cfg)
        .iter()
        .map(|d| vocab.decode(&d.tokens()))
        .collect::<Result<Vec<_>>>()?;
    Ok((bleu(&hyps, refs)?, hyps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Row {
    /// R data, student architecture.
    TeacherSmall,
    /// R data, teacher architecture; the source of the A data.
    Teacher,
    /// A data, student architecture.
    Student,
    /// R+A data, combined architecture.
    Combined,
}

impl Row {
    pub const ALL: [Row; 4] = [Row::TeacherSmall, Row::Teacher, Row::Student, Row::Combined];

    pub fn data(self) -> DataMode {
        match self {
            Row::TeacherSmall | Row::Teacher => DataMode::R,
            Row::Student => DataMode::A,
            Row::Combined => DataMode::RPlusA,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Row::TeacherSmall => "teacher-small",
            Row::Teacher => "teacher",
            Row::Student => "student",
            Row::Combined => "combined",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub row: Row,
    pub layers: usize,
    pub hidden: usize,
    pub train_pairs: usize,
    pub valid: BleuReport,
    pub test: BleuReport,
    pub fingerprint: String,
}

/// Reference vs teacher-hypothesis statistics over the kept training pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub ref_length: Histogram,
    pub hyp_length: Histogram,
    pub ref_crossings: Histogram,
    pub hyp_crossings: Histogram,
    /// Hypothesis minus reference, percentage points.
    pub length_diff: Curve,
    pub crossing_diff: Curve,
}

/// Length and crossing statistics of `hyp` against `reference`, which must
/// share sources pair by pair.
pub fn analyze(
    reference: &ParallelCorpus,
    hyp: &ParallelCorpus,
    aligner: &AlignerConfig,
) -> Result<Analysis> {
    if reference.len() != hyp.len() {
        return Err(Error::LengthMismatch {
            what: "reference vs hypothesis pairs",
            left: reference.len(),
            right: hyp.len(),
        });
    }
    if let Some(i) =
        (0..reference.len()).find(|&i| reference.pairs[i].source != hyp.pairs[i].source)
    {
        return Err(Error::SourceMismatch(i));
    }
    let ref_links = align_corpus(reference, &train_aligner(reference, aligner)?);
    let hyp_links = align_corpus(hyp, &train_aligner(hyp, aligner)?);
    let ref_length = length_diff_histogram(reference)?;
    let hyp_length = length_diff_histogram(hyp)?;
    Ok(Analysis {
        length_diff: hyp_length.difference(&ref_length),
        crossing_diff: crossing_difference(&hyp_links, &ref_links, MAX_CROSSINGS)?,
        ref_crossings: crossing_distribution(&ref_links, MAX_CROSSINGS)?,
        hyp_crossings: crossing_distribution(&hyp_links, MAX_CROSSINGS)?,
        ref_length,
        hyp_length,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedReport {
    pub seed: u64,
    pub rows: Vec<RowResult>,
    pub teacher_fingerprint: String,
    pub distilled_pairs: usize,
    pub dropped: usize,
    pub analysis: Analysis,
}

impl SeedReport {
    pub fn row(&self, row: Row) -> &RowResult {
        self.rows
            .iter()
            .find(|r| r.row == row)
            .expect("every row is trained")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineReport {
    pub seeds: Vec<SeedReport>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl PipelineReport {
    /// Median over seeds of `(valid, test)` BLEU for one row.
    pub fn median_bleu(&self, row: Row) -> (f64, f64) {
        (
            median(self.seeds.iter().map(|s| s.row(row).valid.bleu).collect()),
            median(self.seeds.iter().map(|s| s.row(row).test.bleu).collect()),
        )
    }

    /// Tab-separated rows per seed, then `median` rows; deltas are against
    /// the teacher row.
    pub fn to_tsv(&self) -> String {
        let mut out =
            String::from("seed\tdata\tlayers\tvalid_bleu\ttest_bleu\tdelta_valid\tdelta_test\n");
        let mut line = |seed: &str, row: Row, layers: usize, v: f64, t: f64, base: (f64, f64)| {
            let (dv, dt) = if matches!(row, Row::Student | Row::Combined) {
                (format!("{:+.2}", v - base.0), format!("{:+.2}", t - base.1))
            } else {
                ("-".into(), "-".into())
            };
            out.push_str(&format!(
                "{seed}\t{}\t{layers}\t{v:.2}\t{t:.2}\t{dv}\t{dt}\n",
                row.data()
            ));
        };
        for s in &self.seeds {
            let teacher = s.row(Row::Teacher);
            for r in &s.rows {
                line(
                    &s.seed.to_string(),
                    r.row,
                    r.layers,
                    r.valid.bleu,
                    r.test.bleu,
                    (teacher.valid.bleu, teacher.test.bleu),
                );
            }
        }
        let base = self.median_bleu(Row::Teacher);
        for row in Row::ALL {
            let (v, t) = self.median_bleu(row);
            line("median", row, self.seeds[0].row(row).layers, v, t, base);
        }
        out
    }

    /// Median BLEU laid out like a results table: data, layers, valid and
    /// test scores, deltas against the teacher in parentheses.
    pub fn render(&self) -> String {
        let base = self.median_bleu(Row::Teacher);
        let mut out = format!(
            "{:<6}{:<10}{:<18}{:<18}\n",
            "Data", "Layers", "Valid", "Test"
        );
        for row in Row::ALL {
            let first = self.seeds[0].row(row);
            let (v, t) = self.median_bleu(row);
            let cell = |x: f64, b: f64| match row {
                Row::Student | Row::Combined => format!("{x:.2} ({:+.2})", x - b),
                _ => format!("{x:.2}"),
            };
            if row == Row::Teacher {
                out.push_str(&"-".repeat(52));
                out.push('\n');
            }
            out.push_str(&format!(
                "{:<6}{:<10}{:<18}{:<18}\n",
                row.data().to_string(),
                format!("{} x {}", first.layers, first.hidden),
                cell(v, base.0),
                cell(t, base.1)
            ));
        }
        out.push_str(&format!(
            "median over seeds {:?}\n",
            self.seeds.iter().map(|s| s.seed).collect::<Vec<_>>()
        ));
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

fn stage_dir(opts: &PipelineOptions, seed: u64, name: &str) -> Option<PathBuf> {
    opts.out_dir
        .as_ref()
        .map(|d| d.join(format!("seed_{seed}")).join(name))
}

/// Teacher, re-translation, and the four trained rows for one seed.
pub fn run_seed(
    plan: &DistillPlan,
    data: &PipelineData,
    seed: u64,
    opts: &PipelineOptions,
) -> Result<SeedReport> {
    let (vs, vt) = (data.src_vocab.len(), data.tgt_vocab.len());
    let log = |msg: String| {
        if opts.verbose {
            eprintln!("[seed {seed}] {msg}");
        }
    };
    let evaluate = |row: Row,
                    stage: &StageConfig,
                    trained: &TrainedModel,
                    vocab: &Vocabulary,
                    pairs: usize|
     -> Result<RowResult> {
        let (valid, _) = evaluate_bleu(
            &trained.model,
            &data.valid,
            &data.valid_refs,
            vocab,
            &plan.decode,
        )?;
        let (test, _) = evaluate_bleu(
            &trained.model,
            &data.test,
            &data.test_refs,
            vocab,
            &plan.decode,
        )?;
        log(format!("{} {}", row.name(), test.line()));
        Ok(RowResult {
            row,
            layers: stage.model.layers,
            hidden: stage.model.hidden_size,
            train_pairs: pairs,
            valid,
            test,
            fingerprint: trained.fingerprint.clone(),
        })
    };

    log("training teacher".into());
    let teacher_stage = plan.teacher.for_data(vs, vt, seed);
    let dir = stage_dir(opts, seed, "teacher");
    let teacher = train_teacher(
        &data.train,
        &data.valid,
        &teacher_stage,
        dir.as_deref(),
        opts.verbose,
    )
    .map_err(|e| e.in_stage("teacher"))?;
    let teacher_row = evaluate(
        Row::Teacher,
        &teacher_stage,
        &teacher,
        &data.tgt_vocab,
        data.train.len(),
    )
    .map_err(|e| e.in_stage("teacher evaluation"))?;

    log("training teacher-small".into());
    let small_stage = plan.student.for_data(vs, vt, seed);
    let small = train_stage(
        &data.train,
        &data.valid,
        &small_stage,
        stage_dir(opts, seed, "teacher_small"),
        opts.verbose,
    )
    .map_err(|e| e.in_stage("teacher-small"))?;
    let small_row = evaluate(
        Row::TeacherSmall,
        &small_stage,
        &small,
        &data.tgt_vocab,
        data.train.len(),
    )
    .map_err(|e| e.in_stage("teacher-small evaluation"))?;

    log("decoding training set".into());
    let distilled = decode_training_set(
        &teacher.model,
        &teacher.fingerprint,
        &data.train,
        &plan.decode,
    );
    log(format!(
        "kept {} pairs, dropped {}",
        distilled.corpus.len(),
        distilled.dropped
    ));
    if let Some(dir) = opts
        .out_dir
        .as_ref()
        .map(|d| d.join(format!("seed_{seed}")))
    {
        write_distilled(&dir, &distilled, &data.src_vocab, &data.tgt_vocab)?;
    }

    let mut rows = vec![small_row, teacher_row];
    for (row, stage) in [
        (Row::Student, &plan.student),
        (Row::Combined, &plan.combined),
    ] {
        log(format!("training {}", row.name()));
        let corpus = assemble(row.data(), &data.train, &distilled, seed)
            .map_err(|e| e.in_stage("assemble"))?;
        let (corpus, valid, vocab) = if plan.rebuild_vocab {
            let (c, v) = rebuild_target_vocab(&corpus, &data.tgt_vocab, plan.max_vocab)?;
            let (valid, _, _) = ParallelCorpus::encode(
                &data
                    .valid
                    .pairs
                    .iter()
                    .map(|p| data.src_vocab.decode(&p.source))
                    .collect::<Result<Vec<_>>>()?,
                &data.valid_refs,
                &data.src_vocab,
                &v,
                TargetKind::Reference,
            )?;
            (c, valid, v)
        } else {
            (corpus, data.valid.clone(), data.tgt_vocab.clone())
        };
        let st = stage.for_data(vs, vocab.len(), seed);
        let trained = train_stage(
            &corpus,
            &valid,
            &st,
            stage_dir(opts, seed, row.name()),
            opts.verbose,
        )
        .map_err(|e| e.in_stage(row.name()))?;
        rows.push(
            evaluate(row, &st, &trained, &vocab, corpus.len())
                .map_err(|e| e.in_stage("student evaluation"))?,
        );
    }

    log("analysis".into());
    let kept_refs = ParallelCorpus::new(
        distilled
            .kept
            .iter()
            .map(|&i| data.train.pairs[i].clone())
            .collect(),
        TargetKind::Reference,
    );
    let analysis = analyze(&kept_refs, &distilled.corpus, &plan.aligner)
        .map_err(|e| e.in_stage("analysis"))?;
    if let Some(dir) = opts
        .out_dir
        .as_ref()
        .map(|d| d.join(format!("seed_{seed}")))
    {
        analysis.write(&dir)?;
    }
    Ok(SeedReport {
        seed,
        rows,
        teacher_fingerprint: teacher.fingerprint,
        distilled_pairs: distilled.corpus.len(),
        dropped: distilled.dropped,
        analysis,
    })
}

fn write_distilled(
    dir: &Path,
    d: &DistilledCorpus,
    src: &Vocabulary,
    tgt: &Vocabulary,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let side = |f: &dyn Fn(&SentencePair) -> Result<Vec<String>>| -> Result<Vec<String>> {
        d.corpus
            .pairs
            .iter()
            .map(|p| f(p).map(|t| join_tokens(&t)))
            .collect()
    };
    write_lines_atomic(
        &dir.join("distilled.src"),
        &side(&|p| src.decode(&p.source))?,
    )?;
    write_lines_atomic(
        &dir.join("distilled.tgt"),
        &side(&|p| tgt.decode(&p.target))?,
    )?;
    let mut meta = KvConfig::new();
    meta.set("teacher_fingerprint", &d.teacher_fingerprint);
    meta.set("kept", d.corpus.len());
    meta.set("dropped", d.dropped);
    write_atomic(&dir.join("distilled.provenance"), meta.render().as_bytes())
}

impl Analysis {
    /// Writes one plot-data file per histogram and curve; returns the paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let a = self;
        let files = [
            (
                "length_ref.dat",
                MetricReport::Histogram(a.ref_length.clone()),
            ),
            (
                "length_hyp.dat",
                MetricReport::Histogram(a.hyp_length.clone()),
            ),
            (
                "length_diff.dat",
                MetricReport::Curve(a.length_diff.clone()),
            ),
            (
                "crossings_ref.dat",
                MetricReport::Histogram(a.ref_crossings.clone()),
            ),
            (
                "crossings_hyp.dat",
                MetricReport::Histogram(a.hyp_crossings.clone()),
            ),
            (
                "crossings_diff.dat",
                MetricReport::Curve(a.crossing_diff.clone()),
            ),
        ];
        let mut paths = Vec::new();
        for (name, report) in files {
            let path = dir.join(name);
            write_atomic(&path, emit_plot_data(&report).as_bytes())?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Runs every seed of the plan and writes `report.tsv` / `report.txt` under
/// the output directory when one is given.
pub fn run_pipeline(
    plan: &DistillPlan,
    data: &PipelineData,
    opts: &PipelineOptions,
) -> Result<PipelineReport> {
    let seeds = plan
        .seeds
        .iter()
        .map(|&s| run_seed(plan, data, s, opts))
        .collect::<Result<Vec<_>>>()?;
    let report = PipelineReport { seeds };
    if let Some(dir) = &opts.out_dir {
        write_atomic(&dir.join("report.tsv"), report.to_tsv().as_bytes())?;
        write_atomic(&dir.join("report.txt"), report.render().as_bytes())?;
        write_atomic(&dir.join("plan.cfg"), plan.to_kv().render().as_bytes())?;
    }
    Ok(report)
}

/// Trains one network on the data selected by `plan.data_mode`.
pub fn train_student(
    plan: &DistillPlan,
    references: &ParallelCorpus,
    distilled: &DistilledCorpus,
    valid: &ParallelCorpus,
    seed: u64,
    out_dir: Option<&Path>,
    verbose: bool,
) -> Result<TrainedModel> {
    let corpus = assemble(plan.data_mode, references, distilled, seed)?;
    let stage = match plan.data_mode {
        DataMode::RPlusA => &plan.combined,
        _ => &plan.student,
    };
    let mut stage = stage.clone();
    stage.train.seed = seed;
    train_stage(
        &corpus,
        valid,
        &stage,
        out_dir.map(Path::to_path_buf),
        verbose,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenSequence;

    fn p(s: &[usize], t: &[usize]) -> SentencePair {
        SentencePair {
            source: TokenSequence(s.to_vec()),
            target: TokenSequence(t.to_vec()),
        }
    }

    fn fixture() -> (ParallelCorpus, DistilledCorpus) {
        let refs = ParallelCorpus::new(
            vec![p(&[4], &[5]), p(&[6, 7], &[8]), p(&[9], &[10, 11])],
            TargetKind::Reference,
        );
        let distilled = DistilledCorpus {
            corpus: ParallelCorpus::new(
                vec![p(&[4], &[12]), p(&[9], &[10])],
                TargetKind::Hypothesis,
            ),
            kept: vec![0, 2],
            dropped: 1,
            teacher_fingerprint: "abc".into(),
            diagnostics: vec![],
        };
        (refs, distilled)
    }

    #[test]
    fn assemble_modes() {
        let (refs, d) = fixture();
        assert_eq!(assemble(DataMode::R, &refs, &d, 1).unwrap(), refs);
        let a = assemble(DataMode::A, &refs, &d, 1).unwrap();
        assert_eq!(a.target_kind, TargetKind::Hypothesis);
        let both = assemble(DataMode::RPlusA, &refs, &d, 1).unwrap();
        assert_eq!(both.len(), refs.len() + d.corpus.len());
        let mut got = both.pairs.clone();
        let mut want: Vec<_> = refs.pairs.iter().chain(&d.corpus.pairs).cloned().collect();
        let key = |x: &SentencePair| (x.source.0.clone(), x.target.0.clone());
        got.sort_by_key(key);
        want.sort_by_key(key);
        assert_eq!(got, want);
        assert_eq!(both, assemble(DataMode::RPlusA, &refs, &d, 1).unwrap());
    }

    #[test]
    fn assemble_rejects_other_sources() {
        let (refs, mut d) = fixture();
        d.corpus.pairs[1].source = TokenSequence(vec![6]);
        assert!(matches!(
            assemble(DataMode::A, &refs, &d, 1),
            Err(Error::SourceMismatch(2))
        ));
    }

    #[test]
    fn plan_parsing() {
        let cfg = KvConfig::parse(
            "seeds=4,5\ndata_mode=R+A\n[teacher]\nlayers=4\nhidden_size=16\nepochs=3\n",
        )
        .unwrap();
        let plan = DistillPlan::from_kv(&cfg).unwrap();
        assert_eq!(plan.seeds, [4, 5]);
        assert_eq!(plan.data_mode, DataMode::RPlusA);
        assert_eq!(plan.student.model.layers, 2);
        assert_eq!(plan.student.model.hidden_size, 16);
        assert_eq!(plan.combined.model.layers, 4);
        assert_eq!(plan.student.train.epochs, 3);
        assert_eq!(DistillPlan::from_kv(&plan.to_kv()).unwrap(), plan);
        assert!(DistillPlan::from_kv(&KvConfig::parse("data_mode=B").unwrap()).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
    }
}
