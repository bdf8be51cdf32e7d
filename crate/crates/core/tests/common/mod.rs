#![allow(dead_code)]

use std::path::Path;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde_json::json;
use ted_core::config::BackendKind;
use ted_core::distill::Engine;
use ted_core::gateway::{ChatRequest, Gateway, ModelClient, ScriptedBackend, ScriptedReply};
use ted_core::prompts::PromptLibrary;
use ted_core::{RunConfig, Sample};

pub fn between<'a>(text: &'a str, open: &str, close: &str) -> &'a str {
    text.split_once(open)
        .and_then(|(_, rest)| rest.split_once(close))
        .map_or("", |(inner, _)| inner.trim())
}

pub fn listed_ids(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?m)^\[(E\d+)\]").unwrap());
    re.captures_iter(text).map(|c| c[1].to_string()).collect()
}

/// Index `i` out of a question of the form "Problem {i}: ...".
pub fn problem_index(text: &str) -> usize {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"Problem (\d+):").unwrap());
    re.captures(text).map_or(0, |c| c[1].parse().unwrap())
}

/// Gold is always B; the wording varies so prompts differ.
pub fn dataset(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            Sample::new(
                format!("p{i:03}"),
                format!(
                    "Problem {i}: which option satisfies all {} constraints? A/B/C/D",
                    i % 5 + 2
                ),
                "B",
            )
        })
        .collect()
}

/// Training script. Students are right on slots below `i % 6`, the teacher
/// is wrong on every fourth problem, the critic adds one lesson per sample and
/// compression merges the first two listed items.
pub fn training_reply(req: &ChatRequest, slot: usize) -> ScriptedReply {
    let full = req.full_text();
    if full.contains("<rollouts>") {
        return ScriptedReply::text("Premises: options A-D\n1. check each constraint\n2. pick\nConclusion: done");
    }
    if full.contains("<student_trajectories>") {
        let i = problem_index(between(&full, "<problem>", "</problem>"));
        let text = format!(
            "Lesson {i}: for a family-{} question check every constraint against each option before choosing.",
            i % 7
        );
        return ScriptedReply::text(json!([{ "action": "add", "text": text }]).to_string());
    }
    if full.contains("experience compression") {
        let ids = listed_ids(&full);
        if ids.len() < 2 {
            return ScriptedReply::text("[]");
        }
        let text = format!(
            "Combined lesson from {} and {}: verify constraints one by one.",
            ids[0], ids[1]
        );
        return ScriptedReply::text(json!([{ "action": "merge", "ids": [ids[0], ids[1]], "text": text }]).to_string());
    }
    let i = problem_index(&req.last_user_text());
    if full.contains("<Answer:>") {
        let letter = if i.is_multiple_of(4) { "D" } else { "B" };
        return ScriptedReply::text(format!("Reasoning.\n<Answer:> {letter}"));
    }
    let letter = if slot < i % 6 { "B" } else { "C" };
    let used: Vec<String> = listed_ids(&full).into_iter().take(2).collect();
    ScriptedReply::text(format!("Reasoning.\nAnswer: {letter}\nUsed: [{}]", used.join(", ")))
}

pub fn client<F>(name: &str, config: &RunConfig, f: F) -> ModelClient
where
    F: Fn(&ChatRequest, usize) -> ScriptedReply + Send + Sync + 'static,
{
    let gateway = Gateway::new(Arc::new(ScriptedBackend::from_fn(name, f)));
    ModelClient::new(gateway, name, config.sampling())
}

pub fn config(dir: &Path, run_id: &str) -> RunConfig {
    let mut c = RunConfig {
        run_id: run_id.into(),
        checkpoint_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    c.student.kind = BackendKind::Scripted;
    c.teacher.kind = BackendKind::Scripted;
    c
}

pub fn engine<F>(config: RunConfig, f: F) -> Engine
where
    F: Fn(&ChatRequest, usize) -> ScriptedReply + Clone + Send + Sync + 'static,
{
    let student = client("student", &config, f.clone());
    let teacher = client("teacher", &config, f);
    Engine::new(config, student, teacher, PromptLibrary::builtin())
}

pub mod golden {
    use std::path::PathBuf;

    use ted_core::gateway::wire::{canonical_string, request_body};
    use ted_core::gateway::{ChatRequest, SamplingParams};
    use ted_core::prompts::{CritiqueInput, PromptLibrary};
    use ted_core::trajectory::{filter_teacher, from_condensed, partition_balance, RawTrajectory, Source};
    use ted_core::{ExperienceId, ExperienceStore, ImageSource, Sample, UpdateAction};

    fn sample() -> Sample {
        Sample::new(
            "g1",
            "A tank fills at 3 L/min and drains at 1 L/min. How long until it holds 10 L?\nA) 2 min B) 5 min C) 10 min D) 4 min",
            "B",
        )
    }

    fn store() -> ExperienceStore {
        let mut s = ExperienceStore::default();
        for text in [
            "When rates act together, combine them into one net rate before dividing.",
            "Eliminate options that violate any stated constraint.",
            "Re-read the question for the quantity actually asked.",
        ] {
            s.apply_update(&UpdateAction::Add { text: text.into() }).unwrap();
        }
        s.record_usage(&[ExperienceId(1)], 1).unwrap();
        s.record_usage(&[ExperienceId(1), ExperienceId(3)], 2).unwrap();
        s
    }

    fn request(model: &str, messages: Vec<ted_core::gateway::ChatMessage>) -> ChatRequest {
        ChatRequest::new(model, messages, &SamplingParams::default())
    }

    fn critique(prompts: &PromptLibrary, teacher_answer: &str) -> ChatRequest {
        let problem = sample();
        let student = |slot: usize, answer: &str, step: &str| {
            let raw = RawTrajectory::new(format!("{step}\nAnswer: {answer}"), Source::Student, slot);
            from_condensed(
                &raw,
                &format!("Premises: fill 3, drain 1, target 10\n1. {step}\nConclusion: {answer}"),
            )
        };
        let students = vec![
            student(0, "B", "net rate is 2 L/min, 10 / 2 = 5"),
            student(1, "A", "only the fill rate matters, 10 / 3 rounds to 2"),
            student(2, "B", "after 5 minutes 15 L in and 5 L out"),
        ];
        let partition = partition_balance(students, &problem.gold);
        let raw = RawTrajectory::new(
            format!("Net rate 2 L/min.\n<Answer:> {teacher_answer}"),
            Source::Teacher,
            0,
        );
        let teacher = from_condensed(
            &raw,
            "Premises: rates\n1. subtract drain from fill\n2. divide\nConclusion: done",
        );
        let store = store();
        let input = CritiqueInput {
            problem: &problem,
            positives: &partition.positives,
            negatives: &partition.negatives,
            teacher: &teacher,
            teacher_verdict: filter_teacher(&teacher, &problem.gold),
            store: &store,
        };
        request("teacher-model", prompts.build_critique_prompt(&input).unwrap().messages)
    }

    /// One request per prompt kind, plus an image-bearing student prompt and
    /// a critique whose teacher missed the gold answer.
    pub fn requests() -> Vec<(&'static str, ChatRequest)> {
        let prompts = PromptLibrary::builtin();
        let store = store();
        let with_image = sample().with_image(ImageSource::Url {
            url: "https://example.com/tank.png".into(),
        });
        vec![
            (
                "student_solve",
                request(
                    "student-model",
                    prompts
                        .build_student_prompt(&sample(), &store.serialize())
                        .unwrap()
                        .messages,
                ),
            ),
            (
                "student_solve_image",
                request(
                    "student-model",
                    prompts
                        .build_student_prompt(&with_image, &store.serialize())
                        .unwrap()
                        .messages,
                ),
            ),
            (
                "teacher_solve",
                request(
                    "teacher-model",
                    prompts.build_teacher_solve_prompt(&sample()).unwrap().messages,
                ),
            ),
            (
                "trajectory_condense",
                request(
                    "student-model",
                    prompts
                        .build_condense_prompt("Net rate 3 - 1 = 2 L/min, so 10 / 2 = 5 minutes.\nAnswer: B", &sample())
                        .unwrap()
                        .messages,
                ),
            ),
            ("teacher_critique", critique(&prompts, "B")),
            ("teacher_critique_negative_teacher", critique(&prompts, "D")),
            (
                "experience_compress",
                request(
                    "teacher-model",
                    prompts.build_compress_prompt(&store, 15, 32).unwrap().messages,
                ),
            ),
        ]
    }

    pub fn fixture_path(name: &str) -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("tests/fixtures/wire/{name}.json"))
    }

    /// Compares the canonical body with its golden file. With `TED_BLESS=1`
    /// the file is rewritten instead.
    pub fn check(name: &str, request: &ChatRequest) -> Result<(), String> {
        let actual = canonical_string(&request_body(request));
        let path = fixture_path(name);
        if std::env::var("TED_BLESS").is_ok_and(|v| v == "1") {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &actual).unwrap();
            return Ok(());
        }
        let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        if expected == actual {
            Ok(())
        } else {
            Err(format!("{name}: request body differs from {}", path.display()))
        }
    }
}

pub mod stub {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};

    use axum::extract::State;
    use axum::http::StatusCode;
    use axum::routing::post;
    use axum::Router;

    #[derive(Clone)]
    struct Shared {
        replies: Arc<Vec<(u16, String)>>,
        hits: Arc<AtomicUsize>,
        bodies: Arc<Mutex<Vec<String>>>,
    }

    pub struct StubServer {
        pub endpoint: String,
        hits: Arc<AtomicUsize>,
        bodies: Arc<Mutex<Vec<String>>>,
    }

    impl StubServer {
        pub fn hits(&self) -> usize {
            self.hits.load(Ordering::SeqCst)
        }

        pub fn bodies(&self) -> Vec<String> {
            self.bodies.lock().unwrap().clone()
        }
    }

    async fn handle(State(shared): State<Shared>, body: String) -> (StatusCode, String) {
        let n = shared.hits.fetch_add(1, Ordering::SeqCst);
        shared.bodies.lock().unwrap().push(body);
        let (status, reply) = shared.replies[n.min(shared.replies.len() - 1)].clone();
        (StatusCode::from_u16(status).unwrap(), reply)
    }

    /// Serves `replies` in order on `/v1/chat/completions`; the last one repeats.
    pub async fn start(replies: Vec<(u16, String)>) -> StubServer {
        let shared = Shared {
            replies: Arc::new(replies),
            hits: Arc::default(),
            bodies: Arc::default(),
        };
        let server = StubServer {
            endpoint: String::new(),
            hits: shared.hits.clone(),
            bodies: shared.bodies.clone(),
        };
        let app = Router::new()
            .route("/v1/chat/completions", post(handle))
            .with_state(shared);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        StubServer {
            endpoint: format!("http://{addr}/v1"),
            ..server
        }
    }

    pub fn ok_body(text: &str, prompt_tokens: u64, completion_tokens: u64) -> String {
        serde_json::json!({
            "id": "chatcmpl-1",
            "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens, "total_tokens": prompt_tokens + completion_tokens},
        })
        .to_string()
    }
}
