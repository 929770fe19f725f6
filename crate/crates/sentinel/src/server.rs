//! The sentinel service: a control listener speaking the wire protocol and
//! an HTTP/JSON API over the same module table.

use std::collections::HashMap;
use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Json, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use evgraph_core::module::{ModuleDescriptor, ModuleState};
use evgraph_core::wire::{encode, FrameDecoder, Message};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};

use crate::registry::{Link, Registry, RegistryError, Topology};

#[derive(Default)]
struct Inner {
    registry: Registry,
    /// Control connection of each connected module.
    directives: HashMap<u32, mpsc::UnboundedSender<Message>>,
    /// Latest view document reported by a module.
    view: Option<String>,
}

/// State shared by the control and HTTP sides.
#[derive(Clone, Default)]
pub struct Shared(Arc<Mutex<Inner>>);

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn modules(&self) -> Vec<ModuleDescriptor> {
        self.lock().registry.list()
    }

    pub fn topology(&self) -> Topology {
        self.lock().registry.topology()
    }

    pub fn view(&self) -> Option<String> {
        self.lock().view.clone()
    }

    /// Records the link and sends the producer its directive.
    pub fn wire(&self, producer: u32, consumer: u32) -> Result<String, RegistryError> {
        let mut inner = self.lock();
        let address = inner.registry.wire(producer, consumer)?;
        let directive = Message::WireDirective {
            producer_id: producer,
            consumer_address: address.clone(),
        };
        match inner.directives.get(&producer) {
            Some(tx) if tx.send(directive).is_ok() => {}
            _ => log::warn!("module {producer} is not connected; directive not delivered"),
        }
        Ok(address)
    }
}

/// Bound but not yet running sentinel.
pub struct Sentinel {
    control: std::net::TcpListener,
    http: std::net::TcpListener,
    shared: Shared,
}

impl Sentinel {
    /// Binds both listeners; port 0 picks a free port.
    pub fn bind(control: SocketAddr, http: SocketAddr) -> io::Result<Sentinel> {
        let control = std::net::TcpListener::bind(control)?;
        let http = std::net::TcpListener::bind(http)?;
        control.set_nonblocking(true)?;
        http.set_nonblocking(true)?;
        Ok(Sentinel {
            control,
            http,
            shared: Shared::default(),
        })
    }

    pub fn control_addr(&self) -> io::Result<SocketAddr> {
        self.control.local_addr()
    }

    pub fn http_addr(&self) -> io::Result<SocketAddr> {
        self.http.local_addr()
    }

    pub fn shared(&self) -> Shared {
        self.shared.clone()
    }

    /// Serves until `shutdown` completes.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> io::Result<()> {
        let control = TcpListener::from_std(self.control)?;
        let http = TcpListener::from_std(self.http)?;
        let (stop_tx, stop_rx) = watch::channel(false);
        let control_task = tokio::spawn(accept_control(control, self.shared.clone(), stop_rx.clone()));
        let mut http_stop = stop_rx;
        let server = axum::serve(http, router(self.shared)).with_graceful_shutdown(async move {
            let _ = http_stop.changed().await;
        });
        let http_task = tokio::spawn(async move { server.await });
        shutdown.await;
        let _ = stop_tx.send(true);
        let _ = control_task.await;
        http_task.await.map_err(io::Error::other)?
    }
}

impl Sentinel {
    /// Serves on a fresh runtime until the process is interrupted.
    pub fn run_until_interrupted(self) -> io::Result<()> {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        runtime.block_on(self.run(async {
            if let Err(e) = tokio::signal::ctrl_c().await {
                log::error!("cannot listen for interrupts: {e}");
                std::future::pending::<()>().await;
            }
            log::info!("interrupted; shutting down");
        }))
    }
}

/// A sentinel running on its own runtime thread, for embedding and tests.
pub struct SentinelHandle {
    pub control_addr: SocketAddr,
    pub http_addr: SocketAddr,
    pub shared: Shared,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<io::Result<()>>>,
}

impl SentinelHandle {
    pub fn start(control: SocketAddr, http: SocketAddr) -> io::Result<SentinelHandle> {
        let sentinel = Sentinel::bind(control, http)?;
        let control_addr = sentinel.control_addr()?;
        let http_addr = sentinel.http_addr()?;
        let shared = sentinel.shared();
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(sentinel.run(async {
                let _ = rx.await;
            }))
        });
        Ok(SentinelHandle {
            control_addr,
            http_addr,
            shared,
            stop: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn stop(mut self) -> io::Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| io::Error::other("sentinel thread panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for SentinelHandle {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

async fn accept_control(listener: TcpListener, shared: Shared, mut stop: watch::Receiver<bool>) {
    let mut tasks = tokio::task::JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    log::debug!("control connection from {peer}");
                    tasks.spawn(control_session(stream, shared.clone(), stop.clone()));
                }
                Err(e) => log::warn!("control accept failed: {e}"),
            },
            _ = stop.changed() => break,
        }
    }
    tasks.shutdown().await;
}

async fn send_frame(stream: &mut tokio::net::tcp::OwnedWriteHalf, message: &Message) -> io::Result<()> {
    let frame = encode(message).map_err(io::Error::other)?;
    stream.write_all(&frame).await
}

/// One module's control connection: `Register` first, then `Status` and
/// `Findings` from the module and directives to it.
async fn control_session(stream: TcpStream, shared: Shared, mut stop: watch::Receiver<bool>) {
    stream.set_nodelay(true).ok();
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 16 * 1024];
    let mut module: Option<u32> = None;
    'session: loop {
        tokio::select! {
            read = rd.read(&mut buf) => {
                let n = match read {
                    Ok(0) | Err(_) => break 'session,
                    Ok(n) => n,
                };
                decoder.push(&buf[..n]);
                loop {
                    let message = match decoder.next_message() {
                        Ok(Some(m)) => m,
                        Ok(None) => break,
                        Err(e) => {
                            log::warn!("dropping control connection: {e}");
                            break 'session;
                        }
                    };
                    match (message, module) {
                        (Message::Register(descriptor), None) => {
                            let reply = {
                                let mut inner = shared.lock();
                                match inner.registry.register(descriptor) {
                                    Ok(id) => {
                                        inner.directives.insert(id, tx.clone());
                                        module = Some(id);
                                        inner.registry.get(id).cloned()
                                    }
                                    Err(e) => {
                                        log::warn!("registration rejected: {e}");
                                        None
                                    }
                                }
                            };
                            match reply {
                                Some(d) => {
                                    log::info!("registered module {} ({})", d.id, d.name);
                                    if send_frame(&mut wr, &Message::Register(d)).await.is_err() {
                                        break 'session;
                                    }
                                }
                                None => break 'session,
                            }
                        }
                        (Message::Status { module_id, state }, Some(_)) => {
                            if let Err(e) = shared.lock().registry.update_status(module_id, state) {
                                log::warn!("status update rejected: {e}");
                            }
                        }
                        (Message::Findings(view), Some(_)) => {
                            if serde_json::from_str::<serde_json::Value>(&view).is_ok() {
                                shared.lock().view = Some(view);
                            } else {
                                log::warn!("ignoring a view that is not JSON");
                            }
                        }
                        (other, _) => {
                            log::warn!("unexpected control message type {:#04x}", other.msg_type());
                            break 'session;
                        }
                    }
                }
            }
            Some(out) = rx.recv() => {
                if send_frame(&mut wr, &out).await.is_err() {
                    break 'session;
                }
            }
            _ = stop.changed() => break 'session,
        }
    }
    if let Some(id) = module {
        let mut inner = shared.lock();
        inner.directives.remove(&id);
        let unfinished = inner
            .registry
            .get(id)
            .is_some_and(|m| matches!(m.status, ModuleState::Registered | ModuleState::Running));
        if unfinished && !*stop.borrow() {
            let _ = inner.registry.update_status(id, ModuleState::Failed);
            log::warn!("module {id} disconnected before finishing");
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub producer: u32,
    pub consumer: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireResponse {
    #[serde(flatten)]
    pub link: Link,
    pub address: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub message: String,
}

fn api_error(status: StatusCode, error: &str, message: String) -> Response {
    (
        status,
        Json(ApiError {
            error: error.to_owned(),
            message,
        }),
    )
        .into_response()
}

impl IntoResponse for RegistryError {
    fn into_response(self) -> Response {
        let status = match self {
            RegistryError::UnknownModule(_) => StatusCode::NOT_FOUND,
            RegistryError::FeatureMismatch { .. } | RegistryError::NoInputInterface(_) => StatusCode::CONFLICT,
            RegistryError::MalformedDescriptor(_) => StatusCode::BAD_REQUEST,
        };
        api_error(status, self.code(), self.to_string())
    }
}

async fn list_modules(State(shared): State<Shared>) -> Json<Vec<ModuleDescriptor>> {
    Json(shared.modules())
}

async fn topology(State(shared): State<Shared>) -> Json<Topology> {
    Json(shared.topology())
}

async fn wire(State(shared): State<Shared>, body: Result<Json<WireRequest>, axum::extract::rejection::JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return api_error(StatusCode::BAD_REQUEST, "MalformedRequest", e.body_text()),
    };
    match shared.wire(req.producer, req.consumer) {
        Ok(address) => Json(WireResponse {
            link: Link {
                producer: req.producer,
                consumer: req.consumer,
            },
            address,
        })
        .into_response(),
        Err(e) => e.into_response(),
    }
}

async fn view(State(shared): State<Shared>) -> Response {
    match shared.view() {
        Some(doc) => ([(header::CONTENT_TYPE, "application/json")], doc).into_response(),
        None => api_error(StatusCode::NOT_FOUND, "NoView", "no module has reported a view yet".into()),
    }
}

async fn allow_any_origin(mut response: Response) -> Response {
    response
        .headers_mut()
        .insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    response
}

pub fn router(shared: Shared) -> Router {
    Router::new()
        .route("/modules", get(list_modules))
        .route("/wire", post(wire))
        .route("/topology", get(topology))
        .route("/view", get(view))
        .layer(axum::middleware::map_response(allow_any_origin))
        .with_state(shared)
}
