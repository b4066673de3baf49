use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value as Json};

use gryphon::broker::MetaRow;
use gryphon::client::SubSpec;
use gryphon::graph::{FlowGraph, META_SPACE};
use gryphon::model::{AttrType, Value};
use gryphon::net::{self, ServeConfig, Session};
use gryphon::optimize::{self, Keep, Rule};
use gryphon::sim::{run_scenario, Scenario};
use gryphon::wire::{Frame, Mode};

/// Information-flow message broker.
///
/// Exit codes: 0 success, 1 validation error or bad usage, 2 runtime error.
#[derive(Parser)]
#[command(name = "gryphon", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a broker.
    Broker {
        #[command(subcommand)]
        cmd: BrokerCmd,
    },
    /// Validate or optimize graph documents.
    Graph {
        #[command(subcommand)]
        cmd: GraphCmd,
    },
    /// Publish events read from --values or, one JSON array per line, stdin.
    Publish(PublishArgs),
    /// Subscribe and stream deliveries as line-delimited JSON.
    Subscribe(SubscribeArgs),
    /// Submit graph changes.
    Meta {
        #[command(subcommand)]
        cmd: MetaCmd,
    },
    /// Run simulator scenarios.
    Sim {
        #[command(subcommand)]
        cmd: SimCmd,
    },
    /// Bundled demos.
    Demo {
        #[command(subcommand)]
        cmd: DemoCmd,
    },
    /// Print a broker's counters.
    Stats(StatsArgs),
}

#[derive(Subcommand)]
enum BrokerCmd {
    Serve(ServeArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "GRYPHON_BROKER_ID")]
    id: String,
    #[arg(long, default_value = "127.0.0.1:7400")]
    listen: String,
    /// Graph document.
    #[arg(long)]
    graph: PathBuf,
    /// Durable logs go to <data-dir>/<id>; without it everything is in memory.
    #[arg(long, env = "GRYPHON_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Neighbouring broker address, as ID=HOST:PORT. Repeatable.
    #[arg(long = "peer", value_parser = parse_peer)]
    peers: Vec<(String, String)>,
}

#[derive(Subcommand)]
enum GraphCmd {
    /// Print the first invariant violation, or OK.
    Check {
        file: PathBuf,
        #[arg(long)]
        pretty: bool,
    },
    /// Apply the rewrite rules to a fixpoint.
    Optimize {
        file: PathBuf,
        /// Where to write the rewritten graph; stdout if absent.
        #[arg(short = 'o', long)]
        output: Option<PathBuf>,
        /// Print the rewrite log and arc counts to stderr.
        #[arg(long)]
        report: bool,
        /// Spaces clients subscribe to; defaults to sinks and interpretations.
        #[arg(long)]
        keep: Vec<String>,
        /// Restrict to these rules.
        #[arg(long = "rule")]
        rules: Vec<String>,
    },
}

#[derive(Args)]
struct Conn {
    /// Broker address.
    #[arg(long, default_value = "127.0.0.1:7400")]
    broker: String,
    /// Client id; defaults to a fresh one per invocation.
    #[arg(long)]
    client_id: Option<String>,
    #[arg(long, default_value_t = 5000)]
    timeout_ms: u64,
}

#[derive(Args)]
struct PublishArgs {
    #[command(flatten)]
    conn: Conn,
    #[arg(long)]
    space: String,
    /// One event as a JSON array (or object, with --graph).
    #[arg(long)]
    values: Option<String>,
    /// Graph document, to coerce numbers and accept objects.
    #[arg(long)]
    graph: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ordered,
    Optimistic,
    Snapshot,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Ordered => Mode::Ordered,
            ModeArg::Optimistic => Mode::Optimistic,
            ModeArg::Snapshot => Mode::Snapshot,
        }
    }
}

#[derive(Args)]
struct SubscribeArgs {
    #[command(flatten)]
    conn: Conn,
    #[arg(long)]
    space: String,
    #[arg(long)]
    predicate: Option<String>,
    #[arg(long, value_enum, default_value = "ordered")]
    mode: ModeArg,
    /// Graph document; needed to keep interpretation state.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Exit after this many events.
    #[arg(long)]
    count: Option<usize>,
    /// Exit after this long (milliseconds); runs until interrupted otherwise.
    #[arg(long)]
    duration_ms: Option<u64>,
}

#[derive(Subcommand)]
enum MetaCmd {
    Submit(MetaArgs),
}

#[derive(Args)]
struct MetaArgs {
    #[command(flatten)]
    conn: Conn,
    /// add_space, remove_space, add_arc or remove_arc.
    #[arg(long)]
    kind: String,
    /// JSON payload file.
    #[arg(long)]
    payload: PathBuf,
    #[arg(long)]
    request_id: Option<String>,
}

#[derive(Subcommand)]
enum SimCmd {
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Trace file; defaults to <scenario>.seed<N>.trace.jsonl next to it.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        pretty: bool,
    },
}

#[derive(Subcommand)]
enum DemoCmd {
    /// Merge two exchanges, compute capital and deliver the big trades.
    Stocks {
        /// symbol,price,volume CSV; the bundled 1000 trades by default.
        #[arg(long)]
        trades: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        pretty: bool,
    },
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    conn: Conn,
    #[arg(long)]
    pretty: bool,
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

type Res = Result<(), Failure>;

fn invalid(e: impl ToString) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

fn parse_peer(s: &str) -> Result<(String, String), String> {
    let (id, addr) = s.split_once('=').ok_or("expected ID=HOST:PORT")?;
    Ok((id.to_string(), addr.to_string()))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<FlowGraph, Failure> {
    FlowGraph::from_json(&read(path)?).map_err(invalid)
}

fn fresh_id(prefix: &str) -> String {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    format!("{prefix}-{}-{nanos}", std::process::id())
}

fn connect(conn: &Conn) -> Result<Session, Failure> {
    let id = conn.client_id.clone().unwrap_or_else(|| fresh_id("cli"));
    Session::connect(&conn.broker, &id).map_err(|e| runtime(format!("{}: {e}", conn.broker)))
}

fn out(line: impl std::fmt::Display) -> Result<(), Failure> {
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "{line}").and_then(|_| stdout.flush()).map_err(runtime)
}

/// Left-aligned columns for `--pretty`.
fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().enumerate().map(|(i, c)| format!("{c:<w$}", w = widths[i])).collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
    }
    s
}

fn serve(a: ServeArgs) -> Res {
    let graph = load_graph(&a.graph)?;
    if !graph.brokers().iter().any(|b| *b == a.id) {
        return Err(invalid(format!("broker `{}` is not in the graph", a.id)));
    }
    let cfg = ServeConfig { id: a.id.clone(), listen: a.listen, graph, data_dir: a.data_dir, peers: a.peers.into_iter().collect::<BTreeMap<_, _>>() };
    let server = net::serve(cfg).map_err(runtime)?;
    eprintln!("broker {} listening on {}", a.id, server.addr());
    server.wait().map_err(runtime)
}

fn graph_check(file: &Path, pretty: bool) -> Res {
    let g = load_graph(file)?;
    if pretty {
        let mut rows = vec![vec!["SPACE".into(), "KIND".into(), "SCHEMA".into(), "BROKER".into(), "DURABLE".into()]];
        for s in g.spaces() {
            rows.push(vec![s.name.clone(), format!("{:?}", s.kind).to_lowercase(), s.schema.name().to_string(), s.broker.clone(), s.durable.to_string()]);
        }
        print!("{}", table(&rows));
    }
    out("OK")
}

fn graph_optimize(file: &Path, output: Option<PathBuf>, report: bool, keep: Vec<String>, rules: Vec<String>) -> Res {
    let g = load_graph(file)?;
    for k in &keep {
        if g.space(k).is_none() {
            return Err(invalid(format!("--keep: no space `{k}`")));
        }
    }
    let rules: Vec<Rule> = if rules.is_empty() {
        Rule::ALL.to_vec()
    } else {
        rules.iter().map(|r| Rule::from_name(r).ok_or_else(|| invalid(format!("unknown rule `{r}`")))).collect::<Result<_, _>>()?
    };
    let keep = if keep.is_empty() { optimize::default_keep(&g) } else { Keep::new(keep) };
    let (out_graph, log) = optimize::rewrite_fixpoint(&g, &rules, &keep);
    if report {
        for r in &log {
            eprintln!("{r}");
        }
        eprintln!("arcs: {} -> {}", g.arcs().len(), out_graph.arcs().len());
    }
    let text = out_graph.to_json_pretty();
    match output {
        Some(p) => fs::write(&p, text + "\n").map_err(|e| runtime(format!("{}: {e}", p.display()))),
        None => out(text),
    }
}

/// JSON → event values, coerced to the space's schema when one is known.
fn event_values(text: &str, space: &str, graph: Option<&FlowGraph>) -> Result<Vec<Value>, Failure> {
    let json: Json = serde_json::from_str(text).map_err(|e| invalid(format!("values: {e}")))?;
    let schema = match graph {
        Some(g) => Some(g.space(space).ok_or_else(|| invalid(format!("no space `{space}`")))?.schema.clone()),
        None => None,
    };
    let items: Vec<Json> = match (json, &schema) {
        (Json::Array(a), _) => a,
        (Json::Object(mut o), Some(s)) => {
            s.attrs().iter().map(|a| o.remove(&a.name).ok_or_else(|| invalid(format!("values: missing `{}`", a.name)))).collect::<Result<_, _>>()?
        }
        (Json::Object(_), None) => return Err(invalid("values: objects need --graph")),
        _ => return Err(invalid("values: expected a JSON array")),
    };
    items
        .into_iter()
        .enumerate()
        .map(|(i, j)| {
            let ty = schema.as_ref().and_then(|s| s.attrs().get(i)).map(|a| a.ty);
            match (j, ty) {
                (Json::Number(n), Some(AttrType::Float64)) => n.as_f64().map(Value::Float).ok_or_else(|| invalid("values: bad number")),
                (j, _) => serde_json::from_value(j).map_err(|e| invalid(format!("values: {e}"))),
            }
        })
        .collect()
}

fn publish(a: PublishArgs) -> Res {
    let graph = a.graph.as_deref().map(load_graph).transpose()?;
    let events: Vec<Vec<Value>> = match &a.values {
        Some(v) => vec![event_values(v, &a.space, graph.as_ref())?],
        None => {
            let mut evs = Vec::new();
            for line in io::stdin().lock().lines() {
                let line = line.map_err(runtime)?;
                if !line.trim().is_empty() {
                    evs.push(event_values(&line, &a.space, graph.as_ref())?);
                }
            }
            evs
        }
    };
    let mut s = connect(&a.conn)?;
    let mut ids = Vec::new();
    for values in events {
        let now = s.now();
        let (id, frame) = s.client.publish(now, &a.space, values);
        s.send(&frame).map_err(runtime)?;
        ids.push(id);
    }
    let n = ids.len();
    s.pump_until(Duration::from_millis(a.conn.timeout_ms), |c| c.acked.len() + c.rejected.len() == n).map_err(runtime)?;
    let mut rejected = false;
    for id in ids {
        let line = match (s.client.acked.get(&id), s.client.rejected.get(&id)) {
            (Some((space, seq)), _) => json!({"pub_id": id, "space": space, "seq": seq}),
            (_, Some(code)) => {
                rejected = true;
                json!({"pub_id": id, "error": code})
            }
            _ => unreachable!("waited for every publish"),
        };
        out(line)?;
    }
    if rejected {
        return Err(invalid("publish rejected"));
    }
    Ok(())
}

fn subscribe(a: SubscribeArgs) -> Res {
    let mode: Mode = a.mode.into();
    let interp = match (&a.graph, mode) {
        (Some(p), Mode::Optimistic | Mode::Snapshot) => {
            let g = load_graph(p)?;
            let sp = g.space(&a.space).ok_or_else(|| invalid(format!("no space `{}`", a.space)))?;
            Some(sp.interp.clone().ok_or_else(|| invalid(format!("`{}` is not an interpretation", a.space)))?)
        }
        _ => None,
    };
    let mut s = connect(&a.conn)?;
    let spec = SubSpec { sub: "s".into(), space: a.space.clone(), predicate: a.predicate, mode };
    let frame = s.client.subscribe(spec, interp);
    s.send(&frame).map_err(runtime)?;
    let end = a.duration_ms.map(|ms| Instant::now() + Duration::from_millis(ms));
    let mut printed = 0usize;
    let mut errors = 0usize;
    loop {
        let frames = s.pump().map_err(runtime)?;
        let sub = &s.client.subs["s"];
        if let Some(code) = sub.errors.get(errors..).and_then(|e| e.first()) {
            return Err(invalid(format!("subscription refused: {code}")));
        }
        errors = sub.errors.len();
        if mode == Mode::Ordered {
            for e in &sub.delivered[printed..] {
                out(json!({"space": e.space, "seq": e.seq, "values": e.values}))?;
            }
            printed = sub.delivered.len();
        } else {
            for f in frames {
                match f {
                    Frame::Event(e) => {
                        out(json!({"space": e.space, "seq": e.seq, "values": e.values}))?;
                        printed += 1;
                    }
                    Frame::Snapshot { upto, state, events, .. } => {
                        out(json!({"snapshot": upto, "state": state, "events": events}))?;
                    }
                    _ => {}
                }
            }
        }
        if a.count.is_some_and(|c| printed >= c) || end.is_some_and(|t| Instant::now() >= t) {
            return Ok(());
        }
    }
}

fn meta_submit(a: MetaArgs) -> Res {
    let payload = read(&a.payload)?;
    serde_json::from_str::<Json>(&payload).map_err(|e| invalid(format!("payload: {e}")))?;
    let request_id = a.request_id.unwrap_or_else(|| fresh_id("req"));
    let mut s = connect(&a.conn)?;
    let spec = SubSpec { sub: "meta".into(), space: META_SPACE.into(), predicate: None, mode: Mode::Ordered };
    let f = s.client.subscribe(spec, None);
    s.send(&f).map_err(runtime)?;
    s.send(&Frame::MetaRequest { request_id: request_id.clone(), kind: a.kind, payload, to: None, barrier: None }).map_err(runtime)?;
    let deadline = Instant::now() + Duration::from_millis(a.conn.timeout_ms);
    let mut seen = 0;
    while Instant::now() < deadline {
        s.pump().map_err(runtime)?;
        let sub = &s.client.subs["meta"];
        for e in &sub.delivered[seen..] {
            let Some(row) = MetaRow::from_values(&e.values) else { continue };
            if row.request_id != request_id {
                continue;
            }
            out(json!({"request_id": row.request_id, "status": row.status, "activation": row.activation}))?;
            match row.status.as_str() {
                "confirmed" => return Ok(()),
                "rejected" => return Err(invalid(format!("rejected: {}", row.activation))),
                _ => {}
            }
        }
        seen = sub.delivered.len();
    }
    Err(runtime(format!("no confirmation for {request_id}")))
}

fn sim_run(scenario: &Path, seed: Option<u64>, trace: Option<PathBuf>, pretty: bool) -> Res {
    let (scn, graph) = Scenario::load(scenario).map_err(invalid)?;
    let seed = seed.unwrap_or(scn.seed);
    let report = run_scenario(&scn, graph, seed).map_err(invalid)?;
    let trace = trace.unwrap_or_else(|| {
        let stem = scenario.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
        scenario.with_file_name(format!("{stem}.seed{seed}.trace.jsonl"))
    });
    fs::write(&trace, report.trace_text()).map_err(|e| runtime(format!("{}: {e}", trace.display())))?;
    if pretty {
        println!("trace: {}", trace.display());
        let mut rows = vec![vec!["CHECK".into(), "RESULT".into(), "DETAIL".into()]];
        for c in &report.checks {
            rows.push(vec![c.name.clone(), if c.passed { "pass" } else { "FAIL" }.into(), c.detail.clone()]);
        }
        print!("{}", table(&rows));
    } else {
        out(json!({"trace": trace.display().to_string(), "seed": seed, "end_tick": report.end_tick}))?;
        for c in &report.checks {
            out(json!({"check": c.name, "passed": c.passed, "detail": c.detail}))?;
        }
    }
    if report.passed() {
        Ok(())
    } else {
        Err(runtime("assertions failed"))
    }
}

fn demo_stocks(trades: Option<PathBuf>, seed: u64, pretty: bool) -> Res {
    let text = match trades {
        Some(p) => read(&p)?,
        None => gryphon::demo::TRADES_CSV.to_string(),
    };
    let trades = gryphon::demo::parse_trades(&text).map_err(invalid)?;
    let run = gryphon::demo::run_stocks(&gryphon::demo::stocks_graph(), &trades, seed).map_err(runtime)?;
    if pretty {
        let mut rows = vec![vec!["SYMBOL".into(), "CAPITAL".into()]];
        for v in &run.delivered {
            let cap = match v[1] {
                Value::Float(c) => format!("{c:.2}"),
                ref other => other.to_string(),
            };
            rows.push(vec![v[0].to_string().trim_matches('"').to_string(), cap]);
        }
        print!("{}", table(&rows));
        return Ok(());
    }
    let mut stdout = io::stdout().lock();
    stdout.write_all(gryphon::demo::render(&run.delivered).as_bytes()).map_err(runtime)
}

fn stats(a: StatsArgs) -> Res {
    let mut s = connect(&a.conn)?;
    let reply = s
        .request(&Frame::Stats { stats: None }, Duration::from_millis(a.conn.timeout_ms), |f| matches!(f, Frame::Stats { stats: Some(_) }))
        .map_err(runtime)?;
    let Frame::Stats { stats: Some(st) } = reply else { unreachable!("matched above") };
    if a.pretty {
        let mut rows = vec![vec!["COUNTER".into(), "VALUE".into()]];
        if let Json::Object(m) = &st {
            for (k, v) in m {
                rows.push(vec![k.clone(), v.to_string()]);
            }
        }
        print!("{}", table(&rows));
        Ok(())
    } else {
        out(st)
    }
}

fn dispatch(cli: Cli) -> Res {
    match cli.cmd {
        Cmd::Broker { cmd: BrokerCmd::Serve(a) } => serve(a),
        Cmd::Graph { cmd: GraphCmd::Check { file, pretty } } => graph_check(&file, pretty),
        Cmd::Graph { cmd: GraphCmd::Optimize { file, output, report, keep, rules } } => graph_optimize(&file, output, report, keep, rules),
        Cmd::Publish(a) => publish(a),
        Cmd::Subscribe(a) => subscribe(a),
        Cmd::Meta { cmd: MetaCmd::Submit(a) } => meta_submit(a),
        Cmd::Sim { cmd: SimCmd::Run { scenario, seed, trace, pretty } } => sim_run(&scenario, seed, trace, pretty),
        Cmd::Demo { cmd: DemoCmd::Stocks { trades, seed, pretty } } => demo_stocks(trades, seed, pretty),
        Cmd::Stats(a) => stats(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    std::panic::set_hook(Box::new(|info| eprintln!("error: internal failure: {info}")));
    match std::panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::Invalid(m))) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Ok(Err(Failure::Runtime(m))) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(_) => ExitCode::from(2),
    }
}
