//! Operator entry points: run an MO server, replay scripted scenarios on the
//! simulated network, and drive the distributed-file demo against a live
//! server.

use clap::{Parser, Subcommand};
use mo::config::{hex_decode, hex_encode, ServerConfig};
use mo::dao::FileDao;
use mo::libserver::Session;
use mo::net::simnet::{self, ABC_SCRIPT};
use mo::net::transport::{SystemClock, TcpTransport};
use mo::security::SecurityPolicy;
use mo::server::runtime::{ServerRuntime, TcpLocalChannel, TcpServer};
use mo::token::{ExpireDate, HomeLocation, Token};
use std::io::{Read, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

#[derive(Parser)]
#[command(name = "mo", about = "Micro-object system tools", version)]
struct Cli {
    /// Configuration file (key=value); MO_CONFIG is the fallback.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Remote channel listen address (host:port).
    #[arg(long, global = true)]
    listen: Option<String>,
    /// Local trusted channel listen address (host:port).
    #[arg(long, global = true)]
    local_listen: Option<String>,
    /// Cache capacity in objects.
    #[arg(long, global = true)]
    cache_capacity: Option<usize>,
    /// Grace period kept past expiry, milliseconds.
    #[arg(long, global = true)]
    grace_ms: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an MO server until SIGTERM/SIGINT; flushes the store on exit.
    Serve,
    /// Replay a scenario on the simulated network ("abc" ships built in).
    Scenario {
        /// Built-in name or script path.
        name: String,
        /// Simulation seed; identical seeds give identical traces.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the delivery trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Distributed-file demo against a reachable local server.
    Fs {
        #[command(subcommand)]
        cmd: FsCmd,
    },
}

#[derive(Subcommand)]
enum FsCmd {
    /// Create an empty file; prints its token.
    Create {
        /// Copy-expire date, milliseconds since the epoch. Defaults to 30
        /// days from now.
        #[arg(long)]
        expire_ms: Option<u64>,
    },
    /// Read a file's content to stdout.
    Read {
        #[arg(long)]
        token: String,
    },
    /// Write one block; content from --data or stdin. Prints the new
    /// content token.
    Write {
        #[arg(long)]
        token: String,
        #[arg(long)]
        block: usize,
        #[arg(long)]
        data: Option<String>,
    },
}

static SHUTDOWN: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_: libc::c_int) {
    SHUTDOWN.store(true, Ordering::SeqCst);
}

fn load_config(cli: &Cli) -> Result<ServerConfig, String> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os("MO_CONFIG").map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            ServerConfig::parse(&text).map_err(|e| format!("bad config: {e}"))?
        }
        None => ServerConfig::with_listen(
            HomeLocation::new("localhost", 7400).expect("default listen"),
            HomeLocation::new("localhost", 7401).expect("default local listen"),
        ),
    };
    if let Some(listen) = &cli.listen {
        cfg.listen = listen.parse().map_err(|e| format!("bad --listen: {e}"))?;
    }
    if let Some(local) = &cli.local_listen {
        cfg.local_listen = local
            .parse()
            .map_err(|e| format!("bad --local-listen: {e}"))?;
    }
    if let Some(cap) = cli.cache_capacity {
        cfg.cache_capacity = cap;
    }
    if let Some(grace) = cli.grace_ms {
        cfg.grace_period_ms = grace;
    }
    cfg.validate().map_err(|e| format!("bad config: {e}"))?;
    Ok(cfg)
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32, String> {
    match &cli.cmd {
        Cmd::Serve => serve(&cli),
        Cmd::Scenario { name, seed, trace } => scenario(name, *seed, trace.as_deref()),
        Cmd::Fs { cmd } => fs(&cli, cmd),
    }
}

fn serve(cli: &Cli) -> Result<i32, String> {
    let cfg = load_config(cli)?;
    let clock = SystemClock::new();
    let transport = TcpTransport::default_timeout();
    let runtime = ServerRuntime::start(cfg.clone(), clock, transport)
        .map_err(|e| format!("cannot start server: {e}"))?;
    let server = TcpServer::bind(runtime.clone()).map_err(|e| format!("bind failure: {e}"))?;
    unsafe {
        libc::signal(libc::SIGTERM, on_signal as *const () as usize);
        libc::signal(libc::SIGINT, on_signal as *const () as usize);
    }
    println!("serving: remote {} local {}", server.remote, server.local);
    while !SHUTDOWN.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    eprintln!("shutting down, flushing store");
    server.stop();
    runtime
        .shutdown()
        .map_err(|e| format!("flush failed: {e}"))?;
    Ok(0)
}

fn scenario(name: &str, seed: u64, trace: Option<&std::path::Path>) -> Result<i32, String> {
    let text = if name == "abc" {
        ABC_SCRIPT.to_string()
    } else {
        std::fs::read_to_string(name).map_err(|e| format!("cannot read script {name}: {e}"))?
    };
    let outcome = match simnet::run_script(&text, seed) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("script error: {e}");
            return Ok(2);
        }
    };
    if let Some(path) = trace {
        std::fs::write(path, outcome.trace_text())
            .map_err(|e| format!("cannot write trace: {e}"))?;
    }
    for snap in &outcome.snapshots {
        println!("{snap}");
    }
    if outcome.passed() {
        println!("scenario {name}: ok ({} deliveries)", outcome.trace.len());
        Ok(0)
    } else {
        for f in &outcome.failures {
            eprintln!("assertion failed: {f}");
        }
        Ok(1)
    }
}

fn fs(cli: &Cli, cmd: &FsCmd) -> Result<i32, String> {
    let cfg = load_config(cli)?;
    let channel = TcpLocalChannel::new(
        cfg.local_listen.clone(),
        cfg.listen.clone(),
        cfg.secret,
        Duration::from_secs(10),
    );
    let session = Session::connect(channel);
    let psec = SecurityPolicy::none();
    let csec = SecurityPolicy::none();
    match cmd {
        FsCmd::Create { expire_ms } => {
            let ms = expire_ms.unwrap_or_else(|| {
                let now = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_millis() as u64)
                    .unwrap_or(0);
                now + 30 * 24 * 3600 * 1000
            });
            let expire = ExpireDate::from_millis(ms).map_err(|e| e.to_string())?;
            let file = FileDao::create(&session, expire, psec, csec).map_err(|e| e.to_string())?;
            println!("{}", hex_encode(&file.token().encode()));
            Ok(0)
        }
        FsCmd::Read { token } => {
            let file = FileDao::open(&session, parse_token(token)?, psec, csec);
            let content = file.read(&session).map_err(|e| e.to_string())?;
            std::io::stdout()
                .write_all(&content)
                .map_err(|e| e.to_string())?;
            Ok(0)
        }
        FsCmd::Write { token, block, data } => {
            let file = FileDao::open(&session, parse_token(token)?, psec, csec);
            let content = match data {
                Some(d) => d.clone().into_bytes(),
                None => {
                    let mut buf = Vec::new();
                    std::io::stdin()
                        .read_to_end(&mut buf)
                        .map_err(|e| e.to_string())?;
                    buf
                }
            };
            let fresh = file
                .write_block(&session, *block, &content)
                .map_err(|e| e.to_string())?;
            println!("{}", hex_encode(&fresh.encode()));
            Ok(0)
        }
    }
}

fn parse_token(hex: &str) -> Result<Token, String> {
    let bytes = hex_decode(hex.trim()).ok_or("token must be hex")?;
    Token::decode(&bytes).map_err(|e| format!("bad token: {e}"))
}
