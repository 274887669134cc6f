use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::adapters::{checkpoint_file_name, store_checkpoint, FinetuneInit};
use crate::backbone::Backbone;
use crate::data::{
    load_jsonl, partition, partition_csv, split_train_eval, synth_corpus, tokenize, Example,
    Partition, PartitionSpec, TokenSeq,
};
use crate::error::{Error, Result};
use crate::metrics::{
    final_eval_csv, loss_curve_csv, mask_file_name, masks_to_string, mean_perplexity, perplexity,
    rounds_csv, similarity_matrix, write_text, ClientRoundRow, EvalReport, RoundSummary,
    SiteSelector,
};
use crate::numerics::RngStream;
use crate::saliency::{search_architecture, KeptHistory, PruneSchedule, SearchSettings};

use super::client::{local_finetune, ClientState, TrainSettings};
use super::config::{DataSource, RunConfig};
use super::server::{ServerState, Upload};
use super::build_heterogeneous_group;

const INIT_STREAM: u64 = 0x1A;
const SEARCH_STREAM: u64 = 0xC5;
const SEARCH_PHASE: u64 = 0;
const TUNE_PHASE: u64 = 1;

/// Per-client record of the architecture search.
#[derive(Clone, Debug)]
pub struct ClientSearch {
    pub client: usize,
    pub kept: KeptHistory,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub rows: Vec<ClientRoundRow>,
    pub summary: RoundSummary,
    pub weight_sum: f64,
    pub wall_ms: u128,
}

/// Everything a finished run reports.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub searches: Vec<ClientSearch>,
    pub rounds: Vec<RoundReport>,
    /// Every client with an eval split, after the last round.
    pub final_eval: Vec<EvalReport>,
}

impl RunOutcome {
    pub fn final_mean_perplexity(&self) -> Option<f64> {
        mean_perplexity(&self.final_eval)
    }

    pub fn loss_curve(&self) -> Vec<RoundSummary> {
        self.rounds.iter().map(|r| r.summary.clone()).collect()
    }
}

pub struct Simulation {
    config: RunConfig,
    backbone: Backbone,
    corpus: Vec<Example>,
    sequences: Vec<TokenSeq>,
    partition: Partition,
    clients: Vec<ClientState>,
    server: ServerState,
    searched: bool,
    pool: rayon::ThreadPool,
}

fn load_corpus(source: &DataSource) -> Result<Vec<Example>> {
    match source {
        DataSource::Synthetic { per_category, seed } => Ok(synth_corpus(*per_category, *seed)),
        DataSource::Jsonl(path) => load_jsonl(path),
    }
}

impl Simulation {
    /// Loads data, partitions it, and builds unsearched clients.
    pub fn new(config: RunConfig, workers: usize) -> Result<Self> {
        config.validate()?;
        let backbone = match &config.backbone_checkpoint {
            Some(path) => {
                let b = Backbone::load(path)?;
                if b.config() != &config.backbone {
                    return Err(Error::config(format!(
                        "backbone checkpoint {} does not match the configured shape",
                        path.display()
                    )));
                }
                b
            }
            None => Backbone::random(config.backbone.clone())?,
        };
        let corpus = load_corpus(&config.data)?;
        if corpus.is_empty() {
            return Err(Error::data("corpus is empty"));
        }
        let sequences: Vec<TokenSeq> = corpus
            .iter()
            .map(|ex| tokenize(ex, config.backbone.max_seq))
            .collect();
        if let Some(i) = sequences.iter().position(|s| s.ids.len() < 2) {
            return Err(Error::data(format!("example {i} serializes to fewer than 2 tokens")));
        }
        let spec = PartitionSpec {
            kind: config.partition,
            clients: config.clients,
            seed: config.seed,
        };
        let partition = partition(&corpus, &spec)?;

        let r_max = config.common_dense_rank()?;
        let budgets: Vec<(Option<_>, usize, f64)> = match config.hetero_ranks {
            Some(ranks) => build_heterogeneous_group(ranks, r_max, config.clients)?
                .into_iter()
                .map(|g| (Some(g.level), g.rank, g.sparsity))
                .collect(),
            None => vec![(None, config.rank, config.sparsity); config.clients],
        };
        let mut clients = Vec::with_capacity(config.clients);
        for (id, (shard, (level, rank, sparsity))) in partition.iter().zip(budgets).enumerate() {
            let (train, eval) = split_train_eval(shard, config.train_fraction, config.seed, id)?;
            clients.push(ClientState {
                id,
                train,
                eval,
                adapters: backbone.empty_adapters(rank, sparsity, r_max),
                level,
                rank,
                sparsity,
                seed: config.seed,
            });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?;
        Ok(Simulation {
            server: ServerState::new(config.seed),
            config,
            backbone,
            corpus,
            sequences,
            partition,
            clients,
            searched: false,
            pool,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn corpus(&self) -> &[Example] {
        &self.corpus
    }

    pub fn sequences(&self) -> &[TokenSeq] {
        &self.sequences
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn clients_mut(&mut self) -> &mut [ClientState] {
        &mut self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    fn init_stream(&self, phase: u64, client: usize) -> RngStream {
        if self.config.shared_init {
            RngStream::derive(self.config.seed, &[INIT_STREAM, phase])
        } else {
            RngStream::derive(self.config.seed, &[INIT_STREAM, phase, 1 + client as u64])
        }
    }

    fn train_settings(&self) -> TrainSettings {
        let c = &self.config;
        TrainSettings {
            epochs: c.local_epochs,
            batch_size: c.batch_size,
            micro_batch: c.micro_batch,
            learning_rate: c.learning_rate,
            optimizer: c.optimizer,
            momentum: c.momentum,
            scope: c.loss_scope,
        }
    }

    /// Searches every client's masks, registers them with the server, and
    /// initializes the adapters for fine-tuning.
    pub fn search(&mut self) -> Result<Vec<ClientSearch>> {
        if self.searched {
            return Err(Error::protocol("mask search already ran for this simulation"));
        }
        let c = &self.config;
        let r_max = c.common_dense_rank()?;
        let epochs = c.prune_epochs_for(r_max);
        let settings = SearchSettings {
            score_batch: c.score_batch,
            micro_batch: c.micro_batch,
        };
        let (metric, scope, seed, finetune_init) = (c.metric, c.loss_scope, c.seed, c.finetune_init);
        let inits: Vec<(RngStream, RngStream)> = (0..self.clients.len())
            .map(|i| (self.init_stream(SEARCH_PHASE, i), self.init_stream(TUNE_PHASE, i)))
            .collect();
        let backbone = &self.backbone;
        let sequences = &self.sequences;
        let clients = &mut self.clients;
        let results: Vec<Result<ClientSearch>> = self.pool.install(|| {
            clients
                .par_iter_mut()
                .zip(inits)
                .map(|(client, (mut search_init, mut tune_init))| {
                    let mut outcome = ClientSearch {
                        client: client.id,
                        kept: Vec::new(),
                        losses: Vec::new(),
                    };
                    if client.sparsity > 0.0 {
                        if client.train.is_empty() {
                            return Err(Error::data(format!(
                                "client {} has no training data for mask search",
                                client.id
                            )));
                        }
                        for pair in client.adapters.values_mut() {
                            pair.init_symmetric(&mut search_init);
                        }
                        let train: Vec<TokenSeq> =
                            client.train.iter().map(|&i| sequences[i].clone()).collect();
                        let schedule = PruneSchedule::new(epochs, client.sparsity)?;
                        let mut rng = RngStream::derive(seed, &[SEARCH_STREAM, client.id as u64]);
                        let o = search_architecture(
                            backbone,
                            &mut client.adapters,
                            &train,
                            schedule,
                            metric,
                            settings,
                            scope,
                            &mut rng,
                        )?;
                        outcome.kept = o.kept;
                        outcome.losses = o.losses;
                    }
                    match finetune_init {
                        FinetuneInit::Reinit => {
                            for pair in client.adapters.values_mut() {
                                pair.init_finetune(&mut tune_init);
                            }
                        }
                        FinetuneInit::KeepSearch => {
                            if client.sparsity == 0.0 {
                                for pair in client.adapters.values_mut() {
                                    pair.init_symmetric(&mut search_init);
                                }
                            }
                        }
                    }
                    Ok(outcome)
                })
                .collect()
        });
        let searches = results.into_iter().collect::<Result<Vec<_>>>()?;
        for client in &self.clients {
            self.server.register(client.id, client.masks())?;
        }
        self.searched = true;
        Ok(searches)
    }

    fn eval_refs(&self, client: &ClientState) -> Vec<&TokenSeq> {
        client.eval.iter().map(|&i| &self.sequences[i]).collect()
    }

    /// Perplexity of the given clients' current adapters.
    pub fn evaluate(&self, ids: &[usize], round: usize) -> Result<Vec<EvalReport>> {
        let scope = self.config.loss_scope;
        let reports: Vec<Result<Option<EvalReport>>> = self.pool.install(|| {
            ids.par_iter()
                .map(|&id| {
                    let client = &self.clients[id];
                    perplexity(
                        &self.backbone,
                        &client.adapters,
                        &self.eval_refs(client),
                        scope,
                        id,
                        round,
                    )
                })
                .collect()
        });
        let mut out = Vec::new();
        for (id, r) in ids.iter().zip(reports) {
            match r? {
                Some(rep) => out.push(rep),
                None => warn!("client {id} has no eval split; perplexity skipped"),
            }
        }
        Ok(out)
    }

    pub fn evaluate_all(&self, round: usize) -> Result<Vec<EvalReport>> {
        let ids: Vec<usize> = (0..self.clients.len()).collect();
        self.evaluate(&ids, round)
    }

    /// One round: sample, train locally, aggregate, dispatch, evaluate.
    pub fn run_round(&mut self, round: usize) -> Result<RoundReport> {
        if !self.searched {
            return Err(Error::protocol("federated rounds require registered masks"));
        }
        let start = Instant::now();
        let k = self.config.participants_per_round();
        let ids = self.server.sample_participants(self.clients.len(), k)?;
        let settings = self.train_settings();
        let mut selected = vec![false; self.clients.len()];
        for &i in &ids {
            selected[i] = true;
        }
        let backbone = &self.backbone;
        let sequences = &self.sequences;
        let clients = &mut self.clients;
        let traces: Vec<(usize, Result<_>)> = self.pool.install(|| {
            clients
                .par_iter_mut()
                .filter(|c| selected[c.id])
                .map(|c| (c.id, local_finetune(c, backbone, sequences, &settings, round)))
                .collect()
        });

        let mut uploads = Vec::new();
        let mut sizes = Vec::new();
        let mut losses = Vec::new();
        for (id, trace) in traces {
            let trace = trace?;
            if trace.is_some() {
                uploads.push(Upload::from_adapters(id, &self.clients[id].adapters));
                sizes.push(self.clients[id].train.len());
            }
            losses.push((id, trace.and_then(|t| t.mean())));
        }
        let dispatch = if uploads.is_empty() {
            Default::default()
        } else {
            self.server
                .aggregate_round(&uploads, &sizes, self.config.aggregation)?
        };
        for (id, modules) in &dispatch {
            self.clients[*id].receive(modules);
        }
        let weight_sum = self.server.last_weights().iter().map(|w| w.1).sum();

        let evals = self.evaluate(&ids, round)?;
        let rows: Vec<ClientRoundRow> = losses
            .iter()
            .map(|&(id, loss)| ClientRoundRow {
                round,
                client: id,
                mean_train_loss: loss,
                eval_ppl: evals.iter().find(|e| e.client == id).map(|e| e.perplexity),
            })
            .collect();
        let trained: Vec<f64> = rows.iter().filter_map(|r| r.mean_train_loss).collect();
        let summary = RoundSummary {
            round,
            mean_train_loss: (!trained.is_empty())
                .then(|| trained.iter().sum::<f64>() / trained.len() as f64),
            mean_eval_ppl: mean_perplexity(&evals),
        };
        let wall_ms = start.elapsed().as_millis();
        info!(
            "round {round}: clients {:?} train loss {:?} eval ppl {:?}",
            ids, summary.mean_train_loss, summary.mean_eval_ppl
        );
        Ok(RoundReport {
            round,
            participants: ids,
            rows,
            summary,
            weight_sum,
            wall_ms,
        })
    }

    /// Search, then `rounds` federated rounds, then a final evaluation of every client.
    pub fn run(&mut self) -> Result<RunOutcome> {
        let searches = self.search()?;
        let mut rounds = Vec::with_capacity(self.config.rounds);
        for t in 0..self.config.rounds {
            rounds.push(self.run_round(t)?);
        }
        let final_eval = self.evaluate_all(self.config.rounds)?;
        Ok(RunOutcome {
            searches,
            rounds,
            final_eval,
        })
    }

    /// Writes masks, partition, similarity matrix and manifest of the current state.
    pub fn write_setup(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("manifest.txt"), &self.config.to_manifest())?;
        write_text(&dir.join("partition.csv"), &partition_csv(&self.partition))?;
        let registry = self.server.registry();
        for (client, masks) in registry {
            write_text(
                &dir.join("masks").join(mask_file_name(*client)),
                &masks_to_string(*client, masks),
            )?;
        }
        if registry.len() >= 2 {
            let ids: Vec<usize> = registry.keys().copied().collect();
            let sim = similarity_matrix(registry, &ids, SiteSelector::All)?;
            write_text(&dir.join("similarity.csv"), &sim.to_csv())?;
        }
        Ok(())
    }

    /// Writes every artifact of a finished run into `dir`.
    pub fn write_outputs(&self, outcome: &RunOutcome, dir: &Path) -> Result<()> {
        self.write_setup(dir)?;
        write_text(&dir.join("loss_curve.csv"), &loss_curve_csv(&outcome.loss_curve()))?;
        let rows: Vec<ClientRoundRow> =
            outcome.rounds.iter().flat_map(|r| r.rows.clone()).collect();
        write_text(&dir.join("rounds.csv"), &rounds_csv(&rows))?;
        write_text(&dir.join("final_eval.csv"), &final_eval_csv(&outcome.final_eval))?;
        let mut timing = String::new();
        for r in &outcome.rounds {
            let _ = writeln!(timing, "round={} wall_ms={}", r.round, r.wall_ms);
        }
        write_text(&dir.join("timing.log"), &timing)?;
        let adir = dir.join("adapters");
        std::fs::create_dir_all(&adir).map_err(|e| Error::io(&adir, e))?;
        for client in &self.clients {
            for (site, pair) in &client.adapters {
                store_checkpoint(pair, &adir.join(checkpoint_file_name(client.id, *site)))?;
            }
        }
        Ok(())
    }
}
