//! End-to-end turn handling: rewrite, resolve products, classify and route,
//! retrieve, reduce, generate, then append the turn to the session.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{resolve, CatalogIndex, HttpSearchClient, ResolveOutcome, SearchClient};
use crate::config::{PipelineConfig, ProviderSelector};
use crate::exec::Execution;
use crate::generation::{
    compose_prompt, default_intent_metadata, generate, ComposedPrompt, FewShotLibrary,
    GeneratedResponse, GenerationProvider, HttpGenerationProvider, ProductTitle, PromptParts,
    ResponseKind,
};
use crate::ingest::{parse_catalog, IngestError, IngestReport};
use crate::intent::{
    route, HttpIntentProvider, IntentClassifier, IntentDistribution, KeywordClassifier,
    RoutingDecision, RoutingKind,
};
use crate::model::{ConversationTurn, IntentLabel, ProductId, Session, UserContext};
use crate::retrieval::{
    chunk, orchestrate, reduce, EmbeddingScorer, PolicySource, ReducedContext, SourceKind,
};
use crate::saq::{derive_focus, rewrite, HttpRewriteProvider, RewriteProvider, StandaloneQuery};
use crate::store::{SessionStore, StoreError};
use crate::sts::{Embedder, HashedBowEmbedder, HttpEmbeddingProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Saq,
    CatalogSearch,
    Intent,
    Retrieval,
    Reduction,
    Generation,
}

impl Stage {
    pub const ORDER: [Stage; 6] = [
        Stage::Saq,
        Stage::CatalogSearch,
        Stage::Intent,
        Stage::Retrieval,
        Stage::Reduction,
        Stage::Generation,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub elapsed_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub entries_per_source: BTreeMap<SourceKind, usize>,
    pub snippets: usize,
    pub unknown_products: Vec<ProductId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub session_id: String,
    pub turn_index: u32,
    pub user_query: String,
    /// Stages that ran, in pipeline order.
    pub stages: Vec<StageRecord>,
    pub standalone_query: Option<StandaloneQuery>,
    pub product_matches: Option<ResolveOutcome>,
    pub intent_distribution: Option<IntentDistribution>,
    pub routing_decision: Option<RoutingDecision>,
    pub source_summary: Option<SourceSummary>,
    pub reduced_context: Option<ReducedContext>,
    pub composed_prompt: Option<ComposedPrompt>,
    pub response: GeneratedResponse,
}

impl TurnTrace {
    pub fn stage_names(&self) -> Vec<Stage> {
        self.stages.iter().map(|s| s.stage).collect()
    }

    pub fn total_ms(&self) -> f64 {
        self.stages.iter().map(|s| s.elapsed_ms).sum()
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("unknown product {0}")]
    UnknownProduct(ProductId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Model slots for each stage. `None` slots use the built-in rules.
pub struct Providers {
    pub rewrite: Option<Box<dyn RewriteProvider>>,
    pub intent: Box<dyn IntentClassifier>,
    pub embedder: Box<dyn Embedder>,
    pub generation: Option<Box<dyn GenerationProvider>>,
    pub search: Option<Box<dyn SearchClient>>,
}

impl Providers {
    pub fn builtin(config: &PipelineConfig) -> Self {
        Self {
            rewrite: None,
            intent: Box::new(KeywordClassifier),
            embedder: Box::new(HashedBowEmbedder::content_words(config.embedding_dim)),
            generation: None,
            search: None,
        }
    }

    pub fn from_config(config: &PipelineConfig) -> Self {
        let mut p = Self::builtin(config);
        if let ProviderSelector::External(url) = &config.saq_provider {
            p.rewrite = Some(Box::new(HttpRewriteProvider::new(url.clone())));
        }
        if let ProviderSelector::External(url) = &config.intent_provider {
            p.intent = Box::new(HttpIntentProvider::new(url.clone()));
        }
        if let ProviderSelector::External(url) = &config.embedding_provider {
            p.embedder = Box::new(HttpEmbeddingProvider::new(
                url.clone(),
                config.embedding_dim,
            ));
        }
        if let ProviderSelector::External(url) = &config.generation_provider {
            p.generation = Some(Box::new(HttpGenerationProvider::new(url.clone())));
        }
        if let Some(url) = &config.search_provider {
            p.search = Some(Box::new(HttpSearchClient::new(url.clone())));
        }
        p
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    catalog: RwLock<Arc<CatalogIndex>>,
    policies: Arc<dyn PolicySource>,
    providers: Providers,
    /// Used whenever the configured embedder fails.
    fallback_embedder: HashedBowEmbedder,
    fewshot: FewShotLibrary,
    intent_metadata: BTreeMap<IntentLabel, String>,
    store: SessionStore,
    exec: Execution,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Times one stage and appends its record.
struct StageClock {
    stages: Vec<StageRecord>,
}

impl StageClock {
    fn run<T>(&mut self, stage: Stage, f: impl FnOnce() -> (T, Option<String>)) -> T {
        let start = Instant::now();
        let (value, error) = f();
        self.stages.push(StageRecord {
            stage,
            elapsed_ms: start.elapsed().as_secs_f64() * 1000.0,
            error,
        });
        value
    }
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        catalog: CatalogIndex,
        policies: Arc<dyn PolicySource>,
        store: SessionStore,
        providers: Providers,
    ) -> Self {
        Self {
            fallback_embedder: HashedBowEmbedder::content_words(config.embedding_dim),
            config,
            catalog: RwLock::new(Arc::new(catalog)),
            policies,
            providers,
            fewshot: FewShotLibrary::builtin(),
            intent_metadata: default_intent_metadata(),
            store,
            exec: Execution::default(),
        }
    }

    pub fn builtin(
        config: PipelineConfig,
        catalog: CatalogIndex,
        policies: Arc<dyn PolicySource>,
        store: SessionStore,
    ) -> Self {
        let providers = Providers::builtin(&config);
        Self::new(config, catalog, policies, store, providers)
    }

    pub fn with_fewshot(mut self, fewshot: FewShotLibrary) -> Self {
        self.fewshot = fewshot;
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    /// Current catalog snapshot; later ingests do not affect it.
    pub fn catalog(&self) -> Arc<CatalogIndex> {
        Arc::clone(&self.catalog.read().unwrap_or_else(|p| p.into_inner()))
    }

    pub fn swap_catalog(&self, catalog: CatalogIndex) {
        *self.catalog.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(catalog);
    }

    /// Parses a catalog file and swaps it in. The old catalog stays in place
    /// when the file cannot be read.
    pub fn ingest_path(&self, path: &Path) -> Result<IngestReport, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let (index, report) = parse_catalog(&text);
        self.swap_catalog(index);
        Ok(report)
    }

    pub fn create_session(
        &self,
        user_context: UserContext,
        page_product_id: Option<ProductId>,
    ) -> Result<Session, PipelineError> {
        if let Some(id) = &page_product_id {
            if self.catalog().get(id).is_none() {
                return Err(PipelineError::UnknownProduct(id.clone()));
            }
        }
        Ok(self.store.create(
            uuid::Uuid::new_v4().to_string(),
            user_context,
            page_product_id,
        )?)
    }

    pub fn session(&self, session_id: &str) -> Result<Session, PipelineError> {
        Ok(self.store.get(session_id)?)
    }

    fn embedder_for(&self, failed: bool) -> &dyn Embedder {
        if failed {
            &self.fallback_embedder
        } else {
            self.providers.embedder.as_ref()
        }
    }

    /// Runs one turn. Stage failures never abort the turn: they are noted in
    /// the trace and answered with a clarification, out-of-scope or IDK
    /// response. Only an unknown session, an empty query or a failed log
    /// write return an error.
    pub fn handle_turn(&self, session_id: &str, query: &str) -> Result<TurnTrace, PipelineError> {
        if query.trim().is_empty() {
            return Err(PipelineError::EmptyQuery);
        }
        let handle = self.store.handle(session_id)?;
        let mut session = handle.lock().unwrap_or_else(|p| p.into_inner());
        let catalog = self.catalog();
        let cfg = &self.config;
        let mut clock = StageClock { stages: Vec::new() };
        let mut trace = TurnTrace {
            session_id: session_id.to_string(),
            turn_index: session.next_turn_index(),
            user_query: query.to_string(),
            stages: Vec::new(),
            standalone_query: None,
            product_matches: None,
            intent_distribution: None,
            routing_decision: None,
            source_summary: None,
            reduced_context: None,
            composed_prompt: None,
            response: GeneratedResponse::fixed(
                ResponseKind::Clarification,
                &cfg.clarification_message,
            ),
        };

        let saq = clock.run(Stage::Saq, || {
            match rewrite(query, &session, &catalog, self.providers.rewrite.as_deref()) {
                Ok(q) => (Some(q), None),
                Err(e) => (None, Some(e.to_string())),
            }
        });
        trace.standalone_query = saq.clone();
        let response = match saq {
            None => trace.response.clone(),
            Some(saq) => self.after_rewrite(&saq, &session, &catalog, &mut clock, &mut trace),
        };
        trace.response = response;
        trace.stages = clock.stages;

        let mut turn = ConversationTurn::new(trace.turn_index, query, trace.response.text.clone());
        turn.timestamp = now_ms();
        turn.standalone_query = trace.standalone_query.as_ref().map(|q| q.text.clone());
        turn.resolved_product_ids = trace
            .product_matches
            .as_ref()
            .map(ResolveOutcome::product_ids)
            .unwrap_or_default();
        self.store.append_turn(&mut session, turn)?;
        Ok(trace)
    }

    fn after_rewrite(
        &self,
        saq: &StandaloneQuery,
        session: &Session,
        catalog: &CatalogIndex,
        clock: &mut StageClock,
        trace: &mut TurnTrace,
    ) -> GeneratedResponse {
        let cfg = &self.config;
        let idk = || {
            GeneratedResponse::idk(
                &cfg.idk_message,
                crate::generation::ResponseProvider::BuiltinExtractive,
            )
        };

        let matches = clock.run(Stage::CatalogSearch, || {
            let mut outcome = resolve(
                saq,
                session,
                catalog,
                self.providers.search.as_deref(),
                cfg.fuzzy_threshold,
            );
            let note = (!outcome.misses.is_empty()).then(|| {
                outcome
                    .misses
                    .iter()
                    .map(|m| format!("unresolved mention {:?}", m.mention))
                    .collect::<Vec<_>>()
                    .join("; ")
            });
            if outcome.matches.is_empty() {
                // a query with no product mention is about the focus product
                let focus = derive_focus(session, catalog);
                if let (Some(id), Some(name)) = (focus.focus_product_id, focus.focus_product_name) {
                    outcome.matches.push(crate::catalog::ProductMatch {
                        product_id: id,
                        matched_name: name,
                        method: crate::catalog::MatchMethod::ExactHistory,
                        score: 1.0,
                    });
                }
            }
            (outcome, note)
        });
        let product_ids = matches.product_ids();
        trace.product_matches = Some(matches);

        let (dist, decision) = clock.run(Stage::Intent, || {
            let (dist, note) = match self.providers.intent.classify(&saq.text) {
                Ok(d) => (d, None),
                Err(e) => (
                    KeywordClassifier::distribution(&saq.text),
                    Some(format!("intent provider failed, used keywords: {e}")),
                ),
            };
            let decision = route(&dist, cfg);
            ((dist, decision), note)
        });
        trace.intent_distribution = Some(dist);
        let intents = decision.selected_intents.clone();
        let out_of_scope = decision.kind == RoutingKind::NonDecision;
        trace.routing_decision = Some(decision);
        if out_of_scope {
            return GeneratedResponse::fixed(ResponseKind::OutOfScope, &cfg.out_of_scope_message);
        }

        let snippets = clock.run(Stage::Retrieval, || {
            match orchestrate(
                &intents,
                &product_ids,
                catalog,
                self.policies.as_ref(),
                self.exec,
            ) {
                Ok(bundle) => {
                    let mut summary = SourceSummary {
                        unknown_products: bundle.unknown_products.clone(),
                        ..Default::default()
                    };
                    for slot in &bundle.slots {
                        for e in &slot.entries {
                            *summary.entries_per_source.entry(e.source_kind).or_default() += 1;
                        }
                    }
                    let snippets = chunk(&bundle);
                    summary.snippets = snippets.len();
                    (Some((snippets, summary)), None)
                }
                Err(e) => (None, Some(e.to_string())),
            }
        });
        let Some((snippets, summary)) = snippets else {
            return idk();
        };
        trace.source_summary = Some(summary);

        let mut embedder_failed = false;
        let reduced = clock.run(Stage::Reduction, || {
            let primary = EmbeddingScorer(self.embedder_for(false));
            match reduce(
                &saq.text,
                snippets.clone(),
                &primary,
                cfg.k_context,
                self.exec,
            ) {
                Ok(r) => (r, None),
                Err(e) => {
                    embedder_failed = true;
                    let fallback = EmbeddingScorer(self.embedder_for(true));
                    let r = reduce(&saq.text, snippets, &fallback, cfg.k_context, self.exec)
                        .expect("built-in embedder is infallible");
                    (
                        r,
                        Some(format!("embedding provider failed, used built-in: {e}")),
                    )
                }
            }
        });

        let titles: Vec<ProductTitle> = product_ids
            .iter()
            .filter_map(|id| {
                catalog.canonical_name(id).map(|name| ProductTitle {
                    product_id: id.clone(),
                    name: name.to_string(),
                })
            })
            .collect();
        let parts = PromptParts {
            persona_instructions: self.fewshot.persona(&intents),
            reduced_context: reduced,
            product_titles: titles,
            user_context: session.user_context.clone(),
            intent_metadata: self.intent_metadata.clone(),
            routed_intents: intents,
            standalone_query: saq.clone(),
        };
        trace.reduced_context = Some(parts.reduced_context.clone());

        clock.run(Stage::Generation, || {
            trace.composed_prompt = compose_prompt(&parts).ok();
            let embedder = self.embedder_for(embedder_failed);
            let provider = self.providers.generation.as_deref();
            match generate(&parts, provider, embedder, cfg.tau_idk, &cfg.idk_message) {
                Ok(r) => {
                    let note = r.fallback_reason.clone();
                    (r, note)
                }
                Err(e) => match generate(
                    &parts,
                    None,
                    self.embedder_for(true),
                    cfg.tau_idk,
                    &cfg.idk_message,
                ) {
                    Ok(r) => (r, Some(e.to_string())),
                    Err(e2) => (idk(), Some(format!("{e}; {e2}"))),
                },
            }
        })
    }
}
